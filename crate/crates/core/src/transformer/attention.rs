use crate::autograd::{AttnSpec, Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

/// Affine map `x W + b` with `W` stored as `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Xavier-uniform weights, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Result<Self> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = (0..fan_in * fan_out).map(|_| rng.uniform(-bound, bound)).collect();
        let weight = store.add(format!("{name}.weight"), Tensor::new(&[fan_in, fan_out], w)?)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]))?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }
}

/// Multi-head attention with its own query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::param(format!("{heads} heads do not divide width {width}")));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.q"), width, width, rng)?,
            key: Linear::new(store, &format!("{name}.k"), width, width, rng)?,
            value: Linear::new(store, &format!("{name}.v"), width, width, rng)?,
            output: Linear::new(store, &format!("{name}.o"), width, width, rng)?,
            heads,
        })
    }

    /// Projects the key and value inputs once so they can be reused across
    /// decoding steps.
    pub fn project_kv(&self, g: &mut Graph, store: &ParamStore, keys: Var, values: Var) -> Result<(Var, Var)> {
        let k = self.key.forward(g, store, keys)?;
        let v = self.value.forward(g, store, values)?;
        Ok((k, v))
    }

    /// Attends from `query` to already-projected keys and values.
    pub fn attend(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        query: Var,
        k: Var,
        v: Var,
        spec: AttnSpec,
    ) -> Result<Var> {
        let q = self.query.forward(g, store, query)?;
        let ctx = g.attention(q, k, v, AttnSpec { heads: self.heads, ..spec })?;
        self.output.forward(g, store, ctx)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        query: Var,
        keys: Var,
        values: Var,
        spec: AttnSpec,
    ) -> Result<Var> {
        let (k, v) = self.project_kv(g, store, keys, values)?;
        self.attend(g, store, query, k, v, spec)
    }
}

/// Which keys a query may see.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    /// Number of leading key positions that are real (the rest is padding).
    pub key_len: usize,
    /// Query `i` may only see keys `j <= i`.
    pub causal: bool,
}

/// Projection-free scaled dot-product attention for one sequence: `q` is
/// `[Tq, D]`, `k` and `v` are `[Tk, D]`, heads split `D` evenly and scores are
/// scaled by `1 / sqrt(D / heads)`. Returns the output `[Tq, D]` and the
/// weights `[heads, Tq, Tk]`.
pub fn multi_head_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    mask: AttentionMask,
) -> Result<(Tensor, Tensor)> {
    if q.rank() != 2 || k.rank() != 2 {
        return Err(Error::shape("attention expects matrices"));
    }
    let (tq, tk) = (q.shape()[0], k.shape()[0]);
    if mask.key_len == 0 || tk == 0 {
        return Err(Error::Empty("no visible keys".into()));
    }
    let mut g = Graph::inference();
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let spec = AttnSpec {
        batch: 1,
        q_len: tq,
        k_len: tk,
        heads,
        causal: mask.causal,
        key_lens: vec![mask.key_len],
    };
    let out = g.attention(qv, kv, vv, spec)?;
    let probs = g.attention_probs(out).expect("attention node").to_vec();
    Ok((g.value(out).clone(), Tensor::new(&[heads, tq, tk], probs)?))
}
