//! Routing policies for the expert stage, used when the pretrained model is
//! adapted to a downstream task with everything else frozen:
//!
//! * teacher-specific: always use one frozen per-teacher gate,
//! * frame-routed: sample one teacher gate per input frame,
//! * layer-routed: sample a teacher gate independently per expert layer,
//! * patch-routed: a fresh trainable per-token gate over the library.
//!
//! Discrete choices are trained with Gumbel-softmax samples passed through
//! a straight-through estimator, and evaluated greedily.

use ver_core::rng::{gumbel_vec, normal_vec, SeedRng};
use ver_core::{ParamStore, Session, Tensor};

use crate::error::{config_err, ModelError, Result};

/// Lowest index attaining the maximum.
pub fn argmax_lowest(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate().skip(1) {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoutingStrategy {
    /// Route every layer through the gate trained for this teacher.
    TeacherSpecific(usize),
    /// One sampled teacher gate shared by all expert layers of a frame.
    FrameRouted,
    /// An independently sampled teacher gate per expert layer.
    LayerRouted,
    /// A trainable per-token gate over the whole library.
    PatchRouted,
}

impl std::fmt::Display for RoutingStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RoutingStrategy::TeacherSpecific(i) => write!(f, "teacher:{i}"),
            RoutingStrategy::FrameRouted => write!(f, "frame"),
            RoutingStrategy::LayerRouted => write!(f, "layer"),
            RoutingStrategy::PatchRouted => write!(f, "patch"),
        }
    }
}

impl std::str::FromStr for RoutingStrategy {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frame" => Ok(RoutingStrategy::FrameRouted),
            "layer" => Ok(RoutingStrategy::LayerRouted),
            "patch" => Ok(RoutingStrategy::PatchRouted),
            other => {
                if let Some(idx) = other.strip_prefix("teacher:") {
                    let i = idx.parse::<usize>().map_err(|_| {
                        ModelError::Config(format!("bad teacher index in strategy '{other}'"))
                    })?;
                    Ok(RoutingStrategy::TeacherSpecific(i))
                } else {
                    Err(ModelError::Config(format!(
                        "unknown routing strategy '{other}' (expected frame, layer, patch, or teacher:<i>)"
                    )))
                }
            }
        }
    }
}

/// One discrete draw with a differentiable surrogate.
pub struct GumbelChoice {
    pub index: usize,
    /// One-hot forward values. In train mode, backward follows the soft
    /// Gumbel-softmax sample instead (straight-through).
    pub weights: Tensor,
    /// The relaxed sample itself, when one was drawn.
    pub soft: Option<Tensor>,
}

/// Draws from `Categorical(probs)` via Gumbel-max and builds the
/// straight-through surrogate at temperature `tau`. Eval mode (`train ==
/// false`) skips sampling and picks the highest probability, ties toward
/// the lowest index.
pub fn sample_categorical_st(
    sess: &Session<'_>,
    probs: &Tensor,
    tau: f64,
    train: bool,
    rng: Option<&mut SeedRng>,
) -> Result<GumbelChoice> {
    let shape = probs.shape();
    if shape.len() != 1 || shape[0] == 0 {
        return config_err(format!("categorical sample wants a nonempty vector, got {shape:?}"));
    }
    if !train {
        let index = argmax_lowest(&probs.value());
        let mut hard = vec![0.0; shape[0]];
        hard[index] = 1.0;
        let weights = sess.constant(hard, &shape)?;
        return Ok(GumbelChoice {
            index,
            weights,
            soft: None,
        });
    }
    let rng = rng.ok_or_else(|| ModelError::Config("train-mode sampling needs an rng".into()))?;
    let g = gumbel_vec::<f64>(rng, shape[0]);
    sample_categorical_st_with(sess, probs, tau, &g)
}

/// Same as [`sample_categorical_st`] in train mode, but with the Gumbel
/// draws supplied by the caller. `g = 0` makes the sample equal
/// `softmax(log probs / tau)` exactly.
pub fn sample_categorical_st_with(
    sess: &Session<'_>,
    probs: &Tensor,
    tau: f64,
    gumbels: &[f64],
) -> Result<GumbelChoice> {
    if !(tau > 0.0) {
        return config_err(format!("temperature must be positive, got {tau}"));
    }
    let shape = probs.shape();
    if shape.len() != 1 || shape[0] != gumbels.len() {
        return config_err(format!(
            "probs shape {shape:?} does not match {} gumbel draws",
            gumbels.len()
        ));
    }
    let g = sess.constant(gumbels.to_vec(), &shape)?;
    let log_pi = probs.clamp_min(1e-12).log()?;
    let soft = log_pi.add(&g)?.scale(1.0 / tau, 0.0).softmax(0)?;
    let index = argmax_lowest(&soft.value());
    let mut hard = vec![0.0; shape[0]];
    hard[index] = 1.0;
    let weights = Tensor::straight_through(&soft, hard)?;
    Ok(GumbelChoice {
        index,
        weights,
        soft: Some(soft),
    })
}

/// Compute-tapering schedule for the per-token gate: the active expert
/// count starts at the full library size and decays linearly (in exact
/// integer arithmetic) to `k_min` at step `horizon`, staying there after.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CtaSchedule {
    pub full: usize,
    pub k_min: usize,
    pub horizon: usize,
}

impl CtaSchedule {
    pub fn new(full: usize, k_min: usize, horizon: usize) -> Result<Self> {
        if k_min == 0 || k_min > full {
            return config_err(format!("k_min {k_min} must be in 1..={full}"));
        }
        if horizon == 0 {
            return config_err("schedule horizon must be positive");
        }
        Ok(Self {
            full,
            k_min,
            horizon,
        })
    }

    /// floor(full - (full - k_min) * step / horizon), clamped below at k_min.
    pub fn k_at(&self, step: usize) -> usize {
        // floor(a - b) == a - ceil(b) for integer a, so the whole thing
        // stays in integer arithmetic.
        let num = (self.full - self.k_min) as u128 * step as u128;
        let dec = num.div_ceil(self.horizon as u128) as usize;
        self.full.saturating_sub(dec).max(self.k_min)
    }
}

/// Frame- and layer-level teacher chooser: attention-pools the tokens with
/// a learned query, then a three-layer SiLU MLP produces one logit per
/// teacher gate. Dropout is applied after each hidden activation in train
/// mode.
#[derive(Debug, Clone)]
pub struct TeacherChoiceRouter {
    pub prefix: String,
    pub token_dim: usize,
    pub hidden_dim: usize,
    pub num_choices: usize,
    pub dropout: f64,
}

impl TeacherChoiceRouter {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        token_dim: usize,
        hidden_dim: usize,
        num_choices: usize,
        dropout: f64,
        std: f64,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        if num_choices == 0 {
            return config_err("router needs at least one choice");
        }
        if !(0.0..1.0).contains(&dropout) {
            return config_err(format!("dropout {dropout} outside [0, 1)"));
        }
        let r = Self {
            prefix: prefix.to_string(),
            token_dim,
            hidden_dim,
            num_choices,
            dropout,
        };
        store.insert(
            &r.name("query"),
            vec![token_dim, 1],
            normal_vec(rng, token_dim, 0.0, std),
        )?;
        let dims: [(usize, usize); 3] = [
            (token_dim, hidden_dim),
            (hidden_dim, hidden_dim),
            (hidden_dim, num_choices),
        ];
        for (i, (din, dout)) in dims.iter().enumerate() {
            store.insert(
                &r.name(&format!("w{}", i + 1)),
                vec![*din, *dout],
                normal_vec(rng, din * dout, 0.0, std),
            )?;
            store.insert(&r.name(&format!("b{}", i + 1)), vec![*dout], vec![0.0; *dout])?;
        }
        Ok(r)
    }

    pub fn name(&self, field: &str) -> String {
        format!("{}.{}", self.prefix, field)
    }

    pub fn param_count(&self) -> usize {
        self.token_dim
            + self.token_dim * self.hidden_dim
            + self.hidden_dim
            + self.hidden_dim * self.hidden_dim
            + self.hidden_dim
            + self.hidden_dim * self.num_choices
            + self.num_choices
    }

    /// Choice probabilities (`[num_choices]`, softmax) for one frame's
    /// tokens (`[T, token_dim]`).
    pub fn forward(
        &self,
        sess: &Session<'_>,
        tokens: &Tensor,
        train: bool,
        dropout_rng: Option<&mut SeedRng>,
    ) -> Result<Tensor> {
        let query = sess.param(&self.name("query"))?;
        let scale = 1.0 / (self.token_dim as f64).sqrt();
        let attn = tokens.matmul(&query)?.scale(scale, 0.0).softmax(0)?;
        let pooled = attn.transpose()?.matmul(tokens)?; // [1, token_dim]

        let mut h = pooled;
        let mut rng = dropout_rng;
        for i in 1..=3 {
            let w = sess.param(&self.name(&format!("w{i}")))?;
            let b = sess.param(&self.name(&format!("b{i}")))?;
            h = h.matmul(&w)?.add(&b)?;
            if i < 3 {
                h = h.silu();
                if train && self.dropout > 0.0 {
                    let r = rng
                        .as_deref_mut()
                        .ok_or_else(|| ModelError::Config("train-mode dropout needs an rng".into()))?;
                    h = h.dropout(self.dropout, r)?;
                }
            }
        }
        Ok(h.reshape(&[self.num_choices])?.softmax(0)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ver_core::rng::substream;

    #[test]
    fn zero_gumbel_noise_recovers_the_distribution_at_unit_temperature() {
        let store = ParamStore::new();
        let sess = Session::new(&store);
        let pi = sess.constant(vec![0.2, 0.3, 0.5], &[3]).unwrap();
        let c = sample_categorical_st_with(&sess, &pi, 1.0, &[0.0; 3]).unwrap();
        let soft = c.soft.unwrap().value();
        for (a, b) in soft.iter().zip([0.2, 0.3, 0.5]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(c.index, 2);
        assert_eq!(c.weights.value(), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn low_temperature_sharpens_toward_one_hot() {
        let store = ParamStore::new();
        let sess = Session::new(&store);
        let pi = sess.constant(vec![0.2, 0.3, 0.5], &[3]).unwrap();
        let c = sample_categorical_st_with(&sess, &pi, 1e-3, &[0.0; 3]).unwrap();
        let soft = c.soft.unwrap().value();
        assert!(soft[2] > 1.0 - 1e-9);
        assert!(soft[0] < 1e-9 && soft[1] < 1e-9);
    }

    #[test]
    fn eval_mode_is_greedy_with_low_index_ties() {
        let store = ParamStore::new();
        let sess = Session::new(&store);
        let pi = sess.constant(vec![0.4, 0.4, 0.2], &[3]).unwrap();
        let c = sample_categorical_st(&sess, &pi, 1.0, false, None).unwrap();
        assert_eq!(c.index, 0);
        assert!(c.soft.is_none());
    }

    #[test]
    fn sampling_frequencies_match_the_distribution() {
        let store = ParamStore::new();
        let target = [0.2, 0.3, 0.5];
        let mut rng = substream(77, "gumbel");
        let n = 20_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            let sess = Session::new(&store);
            let pi = sess.constant(target.to_vec(), &[3]).unwrap();
            let c = sample_categorical_st(&sess, &pi, 1.0, true, Some(&mut rng)).unwrap();
            counts[c.index] += 1;
        }
        for (i, t) in target.iter().enumerate() {
            let f = counts[i] as f64 / n as f64;
            assert!((f - t).abs() < 0.02, "choice {i}: {f} vs {t}");
        }
    }

    #[test]
    fn straight_through_gradient_reaches_the_probabilities() {
        let mut store = ParamStore::new();
        store.insert("logits", vec![3], vec![0.1, 0.4, -0.2]).unwrap();
        let sess = Session::new(&store);
        let pi = sess.param("logits").unwrap().softmax(0).unwrap();
        let c = sample_categorical_st_with(&sess, &pi, 1.0, &[0.3, -0.1, 0.2]).unwrap();
        sess.backward(&c.weights.mul(&sess.constant(vec![1.0, 2.0, 3.0], &[3]).unwrap()).unwrap().sum())
            .unwrap();
        let grads = sess.gradients();
        assert_eq!(grads.len(), 1);
        assert!(grads[0].1.iter().any(|g| g.abs() > 1e-9));
    }

    #[test]
    fn taper_schedule_endpoints_and_monotonicity() {
        let s = CtaSchedule::new(6, 2, 100).unwrap();
        assert_eq!(s.k_at(0), 6);
        assert_eq!(s.k_at(100), 2);
        assert_eq!(s.k_at(10_000), 2);
        let mut prev = s.k_at(0);
        for step in 1..=120 {
            let k = s.k_at(step);
            assert!(k <= prev);
            assert!(k >= 2);
            prev = k;
        }
    }

    #[test]
    fn taper_matches_float_formula_on_a_grid() {
        for (full, k_min, horizon) in [(6, 1, 7), (6, 2, 100), (12, 3, 997), (5, 5, 10)] {
            let s = CtaSchedule::new(full, k_min, horizon).unwrap();
            for step in 0..=(horizon + 50) {
                let f = (full as f64
                    - (full - k_min) as f64 * step as f64 / horizon as f64)
                    .floor()
                    .max(k_min as f64) as usize;
                assert_eq!(s.k_at(step), f, "full={full} k_min={k_min} h={horizon} s={step}");
            }
        }
    }

    #[test]
    fn router_output_is_a_distribution_and_eval_is_deterministic() {
        let mut store = ParamStore::new();
        let mut rng = substream(5, "init");
        let r = TeacherChoiceRouter::init(&mut store, "fr", 8, 8, 3, 0.1, 0.1, &mut rng).unwrap();
        let toks: Vec<f64> = (0..32).map(|i| (i as f64 * 0.13).cos()).collect();
        let run = || {
            let sess = Session::new(&store);
            let t = sess.constant(toks.clone(), &[4, 8]).unwrap();
            r.forward(&sess, &t, false, None).unwrap().value()
        };
        let p = run();
        assert_eq!(p, run());
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|v| *v > 0.0));
    }

    #[test]
    fn strategy_strings_round_trip() {
        for s in [
            RoutingStrategy::TeacherSpecific(2),
            RoutingStrategy::FrameRouted,
            RoutingStrategy::LayerRouted,
            RoutingStrategy::PatchRouted,
        ] {
            let text = s.to_string();
            assert_eq!(text.parse::<RoutingStrategy>().unwrap(), s);
        }
        assert!("bogus".parse::<RoutingStrategy>().is_err());
    }
}
