//! SurfaceFusion: a token distribution conditioned only on source word
//! embeddings, fused with the decoder's own distribution at the output.
//!
//! The surface representation `r_j` attends from the top decoder state
//! (query) over the final encoder layer (keys) and the position-free source
//! embeddings (values). It is mapped to logits with the decoder's own
//! pre-softmax weight and turned into `P(y_j | x)` with a temperature softmax.
//! The two distributions are then combined by
//!
//! * hard fusion: `lambda * log P(y_j | y_<j, x) + (1 - lambda) * log P(y_j | x)`
//! * soft fusion: `log softmax(E_j + log P(y_j | x))`, where `E_j` are the
//!   decoder's pre-softmax logits.

use serde::{Deserialize, Serialize};

use crate::autograd::{AttnSpec, Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};
use crate::transformer::MultiHeadAttention;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    None,
    Coarse,
    Fine,
    FineUppermost,
    SurfaceHard,
    SurfaceSoft,
}

impl FusionMode {
    pub const ALL: [FusionMode; 6] = [
        Self::None,
        Self::Coarse,
        Self::Fine,
        Self::FineUppermost,
        Self::SurfaceHard,
        Self::SurfaceSoft,
    ];

    pub fn is_layer_attention(self) -> bool {
        matches!(self, Self::Coarse | Self::Fine | Self::FineUppermost)
    }

    pub fn is_surface(self) -> bool {
        matches!(self, Self::SurfaceHard | Self::SurfaceSoft)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Coarse => "coarse",
            Self::Fine => "fine",
            Self::FineUppermost => "fine-uppermost",
            Self::SurfaceHard => "surface-hard",
            Self::SurfaceSoft => "surface-soft",
        }
    }
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => Self::None,
            "coarse" => Self::Coarse,
            "fine" => Self::Fine,
            "fine-uppermost" => Self::FineUppermost,
            "surface-hard" => Self::SurfaceHard,
            "surface-soft" => Self::SurfaceSoft,
            other => return Err(Error::param(format!("unknown fusion mode `{other}`"))),
        })
    }
}

/// Where DropConnect is applied in layer attention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DropConnectTarget {
    /// The learnable logits, before the layer softmax.
    #[default]
    Logits,
    /// The normalized weights, after the layer softmax.
    Normalized,
}

fn default_lambda() -> f64 {
    0.9
}

fn default_p() -> f64 {
    0.3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub mode: FusionMode,
    /// Hard-fusion interpolation weight on the decoder distribution.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Surface softmax temperature; defaults to 5 for soft and 1 for hard fusion.
    #[serde(default)]
    pub tau: Option<f64>,
    /// DropConnect probability for layer attention weights.
    #[serde(default = "default_p")]
    pub p: f64,
    #[serde(default)]
    pub dropconnect_target: DropConnectTarget,
    /// Renormalize the hard-fusion score into a distribution.
    #[serde(default)]
    pub renormalize: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self::new(FusionMode::None)
    }
}

impl FusionConfig {
    pub fn new(mode: FusionMode) -> Self {
        Self {
            mode,
            lambda: default_lambda(),
            tau: None,
            p: default_p(),
            dropconnect_target: DropConnectTarget::Logits,
            renormalize: false,
        }
    }

    pub fn tau(&self) -> f64 {
        self.tau.unwrap_or(match self.mode {
            FusionMode::SurfaceSoft => 5.0,
            _ => 1.0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |path: &str, message: String| {
            Err(Error::Config {
                path: format!("fusion.{path}"),
                message,
            })
        };
        if !(0.0..=1.0).contains(&self.lambda) {
            return fail("lambda", format!("{} not in [0, 1]", self.lambda));
        }
        if !(self.tau() > 0.0) {
            return fail("tau", format!("{} must be positive", self.tau()));
        }
        if !(0.0..1.0).contains(&self.p) {
            return fail("p", format!("{} not in [0, 1)", self.p));
        }
        Ok(())
    }
}

/// `softmax(r V / tau)`, with `V` given as the `[vocab, D]` embedding-layout
/// pre-softmax weight (so `r V` is `r * table^T`).
pub fn surface_probability(r: &Tensor, pre_softmax: &Tensor, tau: f64) -> Result<Tensor> {
    let mut g = Graph::inference();
    let rv = g.constant(r.clone());
    let table = g.constant(pre_softmax.clone());
    let logits = g.matmul_nt(rv, table)?;
    let p = g.softmax(logits, 1, tau)?;
    Ok(g.value(p).clone())
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::param(format!("lambda {lambda} not in [0, 1]")));
    }
    Ok(())
}

/// Graph form of hard fusion.
pub fn hard_fuse_var(g: &mut Graph, log_p1: Var, log_p2: Var, lambda: f64) -> Result<Var> {
    check_lambda(lambda)?;
    let a = g.scale(log_p1, lambda);
    let b = g.scale(log_p2, 1.0 - lambda);
    g.add(a, b)
}

/// Graph form of soft fusion.
pub fn soft_fuse_var(g: &mut Graph, logits: Var, log_p2: Var) -> Result<Var> {
    let s = g.add(logits, log_p2)?;
    g.log_softmax(s, 1, 1.0)
}

/// Log-linear interpolation of two log-distributions. The result is an
/// unnormalized log-score.
pub fn hard_fuse(log_p1: &Tensor, log_p2: &Tensor, lambda: f64) -> Result<Tensor> {
    let mut g = Graph::inference();
    let (a, b) = (g.constant(log_p1.clone()), g.constant(log_p2.clone()));
    let out = hard_fuse_var(&mut g, a, b, lambda)?;
    Ok(g.value(out).clone())
}

/// `log softmax(logits + log_p2)` row-wise.
pub fn soft_fuse(logits: &Tensor, log_p2: &Tensor) -> Result<Tensor> {
    let mut g = Graph::inference();
    let (a, b) = (g.constant(logits.clone()), g.constant(log_p2.clone()));
    let out = soft_fuse_var(&mut g, a, b)?;
    Ok(g.value(out).clone())
}

/// The surface attention network, separate from every cross-attention.
#[derive(Clone, Debug)]
pub struct SurfaceHead {
    pub attention: MultiHeadAttention,
}

impl SurfaceHead {
    pub fn new(store: &mut ParamStore, width: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            attention: MultiHeadAttention::new(store, "surface.attn", width, heads, rng)?,
        })
    }

    /// Projects the encoder output (keys) and position-free embeddings
    /// (values) once per source batch.
    pub fn project_source(&self, g: &mut Graph, store: &ParamStore, final_layer: Var, x_emb: Var) -> Result<(Var, Var)> {
        self.attention.project_kv(g, store, final_layer, x_emb)
    }

    /// Surface representation `r` for the decoder states in `query`.
    pub fn represent(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        query: Var,
        kv: (Var, Var),
        spec: AttnSpec,
    ) -> Result<Var> {
        self.attention.attend(g, store, query, kv.0, kv.1, spec)
    }

    /// `log P(y | x)` for surface representations `r`, sharing `pre_softmax`
    /// (a `[vocab, D]` parameter) with the decoder output layer.
    pub fn log_probability(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        r: Var,
        pre_softmax: ParamId,
        tau: f64,
    ) -> Result<Var> {
        let table = g.param(store, pre_softmax);
        let logits = g.matmul_nt(r, table)?;
        g.log_softmax(logits, 1, tau)
    }
}

/// Surface attention for a single sentence: decoder states `y_top` `[J, D]`,
/// final encoder layer `[I, D]`, embeddings `[I, D]`.
pub fn surface_attention(
    store: &ParamStore,
    head: &SurfaceHead,
    y_top: &Tensor,
    final_layer: &Tensor,
    x_emb: &Tensor,
) -> Result<Tensor> {
    let (j, i) = (y_top.rows(), final_layer.rows());
    if i == 0 {
        return Err(Error::Empty("surface attention over an empty source".into()));
    }
    let mut g = Graph::inference();
    let (y, xn, xe) = (
        g.constant(y_top.clone()),
        g.constant(final_layer.clone()),
        g.constant(x_emb.clone()),
    );
    let kv = head.project_source(&mut g, store, xn, xe)?;
    let spec = AttnSpec {
        batch: 1,
        q_len: j,
        k_len: i,
        heads: head.attention.heads,
        causal: false,
        key_lens: vec![i],
    };
    let r = head.represent(&mut g, store, y, kv, spec)?;
    Ok(g.value(r).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{log_softmax_temp, softmax_temp};
    use crate::tensor::Rng;
    use proptest::prelude::*;

    fn rand(rng: &mut Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn config_defaults() {
        assert_eq!(FusionConfig::new(FusionMode::SurfaceSoft).tau(), 5.0);
        assert_eq!(FusionConfig::new(FusionMode::SurfaceHard).tau(), 1.0);
        let c = FusionConfig::new(FusionMode::Fine);
        assert_eq!(c.p, 0.3);
        assert_eq!(c.lambda, 0.9);
        let mut bad = FusionConfig::new(FusionMode::SurfaceHard);
        bad.lambda = 1.5;
        assert!(bad.validate().is_err());
        bad.lambda = 0.5;
        bad.tau = Some(0.0);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in [
            FusionMode::None,
            FusionMode::Coarse,
            FusionMode::Fine,
            FusionMode::FineUppermost,
            FusionMode::SurfaceHard,
            FusionMode::SurfaceSoft,
        ] {
            assert_eq!(m.as_str().parse::<FusionMode>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.as_str()));
        }
    }

    #[test]
    fn surface_attention_single_source_position() {
        let mut rng = Rng::new(1);
        let mut store = ParamStore::new();
        let head = SurfaceHead::new(&mut store, 4, 2, &mut rng).unwrap();
        let y = rand(&mut rng, &[3, 4]);
        let xn = rand(&mut rng, &[1, 4]);
        let xe = rand(&mut rng, &[1, 4]);
        let r = surface_attention(&store, &head, &y, &xn, &xe).unwrap();
        // Every query sees only x_emb[0]: r_j = (x_emb[0] Wv + bv) Wo + bo.
        let mut g = Graph::inference();
        let x = g.constant(xe.clone());
        let v = head.attention.value.forward(&mut g, &store, x).unwrap();
        let o = head.attention.output.forward(&mut g, &store, v).unwrap();
        let expected = g.value(o).row(0).to_vec();
        for j in 0..3 {
            for (a, b) in r.row(j).iter().zip(&expected) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn surface_attention_identical_keys_average_values() {
        let mut rng = Rng::new(2);
        let mut store = ParamStore::new();
        let head = SurfaceHead::new(&mut store, 4, 1, &mut rng).unwrap();
        let y = rand(&mut rng, &[2, 4]);
        let key_row = rand(&mut rng, &[1, 4]);
        let xn = Tensor::new(&[3, 4], key_row.data().repeat(3)).unwrap();
        let xe = rand(&mut rng, &[3, 4]);
        let r = surface_attention(&store, &head, &y, &xn, &xe).unwrap();
        let mean: Vec<f64> = (0..4).map(|d| (0..3).map(|i| xe.at(&[i, d])).sum::<f64>() / 3.0).collect();
        let mut g = Graph::inference();
        let x = g.constant(Tensor::new(&[1, 4], mean).unwrap());
        let v = head.attention.value.forward(&mut g, &store, x).unwrap();
        let o = head.attention.output.forward(&mut g, &store, v).unwrap();
        for j in 0..2 {
            for (a, b) in r.row(j).iter().zip(g.value(o).row(0)) {
                assert!((a - b).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn surface_attention_two_positions_hand_rolled() {
        let mut rng = Rng::new(3);
        let mut store = ParamStore::new();
        let head = SurfaceHead::new(&mut store, 2, 1, &mut rng).unwrap();
        let y = rand(&mut rng, &[1, 2]);
        let xn = rand(&mut rng, &[2, 2]);
        let xe = rand(&mut rng, &[2, 2]);
        let r = surface_attention(&store, &head, &y, &xn, &xe).unwrap();

        // Hand-rolled: explicit scalar loops over the projection weights.
        let lin = |x: &[f64], l: &crate::transformer::Linear| -> Vec<f64> {
            let w = store.value(l.weight);
            let b = store.value(l.bias);
            (0..2)
                .map(|o| b.data()[o] + (0..2).map(|i| x[i] * w.at(&[i, o])).sum::<f64>())
                .collect()
        };
        let q = lin(y.row(0), &head.attention.query);
        let k: Vec<Vec<f64>> = (0..2).map(|i| lin(xn.row(i), &head.attention.key)).collect();
        let v: Vec<Vec<f64>> = (0..2).map(|i| lin(xe.row(i), &head.attention.value)).collect();
        let s: Vec<f64> = k
            .iter()
            .map(|ki| (q[0] * ki[0] + q[1] * ki[1]) / 2f64.sqrt())
            .collect();
        let z = s[0].exp() + s[1].exp();
        let a = [s[0].exp() / z, s[1].exp() / z];
        let ctx = [a[0] * v[0][0] + a[1] * v[1][0], a[0] * v[0][1] + a[1] * v[1][1]];
        let expected = lin(&ctx, &head.attention.output);
        for (x, e) in r.row(0).iter().zip(&expected) {
            assert!((x - e).abs() < 1e-13);
        }
    }

    #[test]
    fn surface_probability_scalar_formula() {
        // D = 2, |V| = 3
        let r = Tensor::new(&[1, 2], vec![0.5, -1.0]).unwrap();
        let table = Tensor::new(&[3, 2], vec![1.0, 0.0, 0.0, 1.0, 2.0, 2.0]).unwrap();
        let tau = 2.0;
        let p = surface_probability(&r, &table, tau).unwrap();
        let logits = [0.5, -1.0, -1.0];
        let z: f64 = logits.iter().map(|l| (l / tau).exp()).sum();
        for (i, l) in logits.iter().enumerate() {
            assert!((p.data()[i] - (l / tau).exp() / z).abs() < 1e-15);
        }
    }

    #[test]
    fn surface_probability_temperature_limits() {
        // r orthogonal to every column except token 1.
        let r = Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap();
        let table = Tensor::new(&[3, 2], vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0]).unwrap();
        let sharp = surface_probability(&r, &table, 1e-3).unwrap();
        assert!(sharp.data()[1] > 1.0 - 1e-12);
        let flat = surface_probability(&r, &table, 1e9).unwrap();
        assert!(flat.data().iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-9));
        assert!(surface_probability(&r, &table, 0.0).is_err());
    }

    #[test]
    fn hard_fuse_endpoints() {
        let mut rng = Rng::new(4);
        let p1 = log_softmax_temp(&rand(&mut rng, &[2, 5]), 1.0).unwrap();
        let p2 = log_softmax_temp(&rand(&mut rng, &[2, 5]), 1.0).unwrap();
        assert_eq!(hard_fuse(&p1, &p2, 1.0).unwrap(), p1);
        assert_eq!(hard_fuse(&p1, &p2, 0.0).unwrap(), p2);
        let same = hard_fuse(&p1, &p1, 0.3).unwrap();
        assert!(same.max_abs_diff(&p1) < 1e-15);
        assert!(hard_fuse(&p1, &p2, -0.1).is_err());
        assert!(hard_fuse(&p1, &p2, 1.1).is_err());
    }

    #[test]
    fn soft_fuse_uniform_surface_is_vanilla() {
        let mut rng = Rng::new(5);
        let e = rand(&mut rng, &[3, 6]);
        let uniform = Tensor::full(&[3, 6], -(6f64.ln()));
        let fused = soft_fuse(&e, &uniform).unwrap();
        let vanilla = log_softmax_temp(&e, 1.0).unwrap();
        assert!(fused.max_abs_diff(&vanilla) < 1e-12);
    }

    #[test]
    fn soft_fuse_constant_logits_renormalize_surface() {
        let p2 = Tensor::new(&[1, 3], vec![0.2f64.ln(), 0.3f64.ln(), 0.5f64.ln()]).unwrap();
        let e = Tensor::full(&[1, 3], 1.7);
        let fused = soft_fuse(&e, &p2).unwrap();
        assert!(fused.max_abs_diff(&p2) < 1e-15);
    }

    #[test]
    fn soft_fuse_hand_example() {
        let e = Tensor::new(&[1, 3], vec![1.0, 0.0, 0.0]).unwrap();
        let p2 = Tensor::new(&[1, 3], vec![0.5f64.ln(), 0.25f64.ln(), 0.25f64.ln()]).unwrap();
        let fused = soft_fuse(&e, &p2).unwrap();
        // softmax([1 + ln .5, ln .25, ln .25]) = [e/2, 1/4, 1/4] / (e/2 + 1/2)
        let z = std::f64::consts::E / 2.0 + 0.5;
        let expected = [
            (std::f64::consts::E / 2.0 / z).ln(),
            (0.25 / z).ln(),
            (0.25 / z).ln(),
        ];
        for (a, b) in fused.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    proptest! {
        #[test]
        fn soft_fuse_rows_are_distributions(
            e in proptest::collection::vec(-20.0f64..20.0, 8),
            s in proptest::collection::vec(-20.0f64..20.0, 8),
        ) {
            let e = Tensor::new(&[2, 4], e).unwrap();
            let p2 = log_softmax_temp(&Tensor::new(&[2, 4], s).unwrap(), 1.0).unwrap();
            let fused = soft_fuse(&e, &p2).unwrap();
            for r in 0..2 {
                let total: f64 = fused.row(r).iter().map(|x| x.exp()).sum();
                prop_assert!((total - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn surface_probability_rows_sum_to_one(
            r in proptest::collection::vec(-5.0f64..5.0, 6),
            tau in 0.01f64..100.0,
        ) {
            let r = Tensor::new(&[3, 2], r).unwrap();
            let table = Tensor::new(&[4, 2], vec![1.0, 0.5, -2.0, 0.1, 0.0, 3.0, 0.7, -0.7]).unwrap();
            let p = surface_probability(&r, &table, tau).unwrap();
            for i in 0..3 {
                prop_assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            let direct = softmax_temp(&r.matmul(&table.transpose().unwrap()).unwrap(), tau).unwrap();
            prop_assert!(p.max_abs_diff(&direct) < 1e-12);
        }
    }
}
