//! Expert networks: two-layer GELU MLPs operating on token rows.

use ver_core::rng::{normal_vec, SeedRng};
use ver_core::{ParamStore, Session, Tensor};

use crate::error::Result;

/// How an expert entered the library. Distilled experts are trained during
/// pretraining and frozen afterwards; scratch experts are appended at
/// adaptation time and stay trainable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpertOrigin {
    Distilled,
    Scratch,
}

impl std::fmt::Display for ExpertOrigin {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ExpertOrigin::Distilled => write!(f, "distilled"),
            ExpertOrigin::Scratch => write!(f, "scratch"),
        }
    }
}

/// Plain two-layer MLP (`in -> hidden -> in`, GELU between). Used both for
/// transformer feed-forward sublayers and as the expert body.
#[derive(Debug, Clone)]
pub struct TwoLayerMlp {
    pub prefix: String,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl TwoLayerMlp {
    /// Registers fresh parameters under `prefix` and returns the module.
    /// Weights are N(0, std^2), biases zero.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        std: f64,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        let m = Self {
            prefix: prefix.to_string(),
            input_dim,
            hidden_dim,
        };
        store.insert(
            &m.name("w1"),
            vec![input_dim, hidden_dim],
            normal_vec(rng, input_dim * hidden_dim, 0.0, std),
        )?;
        store.insert(&m.name("b1"), vec![hidden_dim], vec![0.0; hidden_dim])?;
        store.insert(
            &m.name("w2"),
            vec![hidden_dim, input_dim],
            normal_vec(rng, hidden_dim * input_dim, 0.0, std),
        )?;
        store.insert(&m.name("b2"), vec![input_dim], vec![0.0; input_dim])?;
        Ok(m)
    }

    /// Attaches to parameters that already exist in a store (e.g. after
    /// loading a checkpoint). Does not validate shapes until forward.
    pub fn attached(prefix: &str, input_dim: usize, hidden_dim: usize) -> Self {
        Self {
            prefix: prefix.to_string(),
            input_dim,
            hidden_dim,
        }
    }

    pub fn name(&self, field: &str) -> String {
        format!("{}.{}", self.prefix, field)
    }

    pub fn param_names(&self) -> [String; 4] {
        [
            self.name("w1"),
            self.name("b1"),
            self.name("w2"),
            self.name("b2"),
        ]
    }

    pub fn param_count(&self) -> usize {
        2 * self.input_dim * self.hidden_dim + self.hidden_dim + self.input_dim
    }

    /// `x` is `[rows, input_dim]`; returns `[rows, input_dim]`.
    pub fn forward(&self, sess: &Session<'_>, x: &Tensor) -> Result<Tensor> {
        let w1 = sess.param(&self.name("w1"))?;
        let b1 = sess.param(&self.name("b1"))?;
        let w2 = sess.param(&self.name("w2"))?;
        let b2 = sess.param(&self.name("b2"))?;
        let h = x.matmul(&w1)?.add(&b1)?.gelu();
        Ok(h.matmul(&w2)?.add(&b2)?)
    }
}

/// A library expert: a `TwoLayerMlp` plus its provenance tag.
#[derive(Debug, Clone)]
pub struct ExpertMlp {
    pub mlp: TwoLayerMlp,
    pub origin: ExpertOrigin,
}

impl ExpertMlp {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        origin: ExpertOrigin,
        std: f64,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        Ok(Self {
            mlp: TwoLayerMlp::init(store, prefix, input_dim, hidden_dim, std, rng)?,
            origin,
        })
    }

    pub fn forward(&self, sess: &Session<'_>, x: &Tensor) -> Result<Tensor> {
        self.mlp.forward(sess, x)
    }

    pub fn prefix(&self) -> &str {
        &self.mlp.prefix
    }

    pub fn param_count(&self) -> usize {
        self.mlp.param_count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ver_core::rng::substream;

    #[test]
    fn forward_shape_and_determinism() {
        let mut store = ParamStore::new();
        let mut rng = substream(7, "init");
        let e = ExpertMlp::init(
            &mut store,
            "exp.0",
            8,
            32,
            ExpertOrigin::Distilled,
            0.02,
            &mut rng,
        )
        .unwrap();
        assert_eq!(e.param_count(), 8 * 32 * 2 + 32 + 8);

        let run = || {
            let sess = Session::new(&store);
            let x = sess.constant(vec![0.3; 3 * 8], &[3, 8]).unwrap();
            e.forward(&sess, &x).unwrap().value()
        };
        let a = run();
        assert_eq!(a.len(), 3 * 8);
        assert_eq!(a, run());
    }

    #[test]
    fn initialization_is_construction_order_dependent_only() {
        let build = || {
            let mut store = ParamStore::new();
            let mut rng = substream(11, "init");
            TwoLayerMlp::init(&mut store, "m", 4, 6, 0.02, &mut rng).unwrap();
            store.digest()
        };
        assert_eq!(build(), build());
    }
}
