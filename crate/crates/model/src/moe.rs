//! Sparse mixture dispatch over a library of experts.
//!
//! Each token keeps its top-K gate probabilities (ties broken toward the
//! lower expert index), the rest are dropped without renormalization, and
//! only the kept (token, expert) pairs are evaluated. With K >= L this
//! reproduces the dense mixture.

use ver_core::rng::SeedRng;
use ver_core::tape::topk_indices;
use ver_core::{ParamStore, Session, Tensor};

use crate::error::{config_err, Result};
use crate::expert::{ExpertMlp, ExpertOrigin};

#[derive(Debug, Clone)]
pub struct MoeLayer {
    /// Parameter prefix, e.g. "vel.1". Experts live at "{prefix}.expert.{l}".
    pub prefix: String,
    pub token_dim: usize,
    pub hidden_dim: usize,
    pub experts: Vec<ExpertMlp>,
}

/// Bookkeeping from one dispatch: which experts ran on how many tokens.
#[derive(Debug, Clone)]
pub struct DispatchInfo {
    /// Per token, the expert indices that were kept (score order, then index).
    pub selected: Vec<Vec<usize>>,
    /// Per expert, how many token rows it was evaluated on.
    pub eval_counts: Vec<usize>,
    /// Total expert evaluations; always `tokens * min(k, experts)`.
    pub total_evals: usize,
}

impl MoeLayer {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        token_dim: usize,
        hidden_dim: usize,
        num_experts: usize,
        std: f64,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        if num_experts == 0 {
            return config_err("expert library must not be empty");
        }
        let mut experts = Vec::with_capacity(num_experts);
        for l in 0..num_experts {
            experts.push(ExpertMlp::init(
                store,
                &format!("{prefix}.expert.{l}"),
                token_dim,
                hidden_dim,
                ExpertOrigin::Distilled,
                std,
                rng,
            )?);
        }
        Ok(Self {
            prefix: prefix.to_string(),
            token_dim,
            hidden_dim,
            experts,
        })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    /// Appends one fresh expert (trainable, scratch origin); returns its index.
    pub fn push_expert(
        &mut self,
        store: &mut ParamStore,
        std: f64,
        rng: &mut SeedRng,
    ) -> Result<usize> {
        let l = self.experts.len();
        self.experts.push(ExpertMlp::init(
            store,
            &format!("{}.expert.{l}", self.prefix),
            self.token_dim,
            self.hidden_dim,
            ExpertOrigin::Scratch,
            std,
            rng,
        )?);
        Ok(l)
    }

    /// Mixes expert outputs for `tokens` (`[T, token_dim]`) under the gate
    /// probabilities `probs` (`[T, experts]`). Exactly `min(k, experts)`
    /// experts are evaluated per token. Kept weights are the raw gate
    /// probabilities unless `renormalize` is set.
    pub fn forward(
        &self,
        sess: &Session<'_>,
        tokens: &Tensor,
        probs: &Tensor,
        k: usize,
        renormalize: bool,
    ) -> Result<(Tensor, DispatchInfo)> {
        let t = tokens.shape()[0];
        let l = self.experts.len();
        let pshape = probs.shape();
        if pshape != [t, l] {
            return config_err(format!(
                "gate probs shape {pshape:?} does not match {t} tokens x {l} experts"
            ));
        }

        let mut weights = probs.topk_mask(k)?;
        if renormalize {
            let row_sums = weights.sum_axis(1)?;
            let inv = sess.tape().scalar(1.0).div(&row_sums)?;
            weights = weights.scale_rows(&inv)?;
        }

        // Selection is recomputed from the same values with the same tie
        // rule the mask op uses, so dispatch and mask agree exactly.
        let pv = probs.value();
        let kk = k.min(l);
        let mut selected = Vec::with_capacity(t);
        let mut rows_for: Vec<Vec<usize>> = vec![Vec::new(); l];
        for ti in 0..t {
            let picks = topk_indices(&pv[ti * l..(ti + 1) * l], kk);
            for &e in &picks {
                rows_for[e].push(ti);
            }
            selected.push(picks);
        }

        let mut out = sess.tape().zeros(&[t, self.token_dim]);
        let mut eval_counts = vec![0usize; l];
        for (e, rows) in rows_for.iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            eval_counts[e] = rows.len();
            let sub = tokens.gather_rows(rows)?;
            let y = self.experts[e].forward(sess, &sub)?;
            let w = weights.slice_cols(e, 1)?.gather_rows(rows)?;
            let contrib = y.scale_rows(&w)?.scatter_add_rows(rows, t)?;
            out = out.add(&contrib)?;
        }

        let total_evals = eval_counts.iter().sum();
        Ok((
            out,
            DispatchInfo {
                selected,
                eval_counts,
                total_evals,
            },
        ))
    }
}
