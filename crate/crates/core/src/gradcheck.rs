//! Finite-difference verification of the reverse pass.

use crate::autograd::{AttnSpec, Graph, ParamId, ParamStore, Var};
use crate::data::{gen_copy, Batch, PAD};
use crate::error::{Error, Result};
use crate::surface_fusion::{FusionConfig, FusionMode};
use crate::tensor::{Rng, Tensor};
use crate::transformer::{ModelConfig, Seq2Seq};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Number of randomly sampled coordinates; `None` checks every scalar.
    pub samples: Option<usize>,
    pub seed: u64,
    /// Negative control: deliberately perturb the analytic gradient.
    pub corrupt: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            samples: None,
            seed: 0,
            corrupt: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates with a kink within `eps` (for example a ReLU input crossing
    /// zero). Any coordinate whose central difference disagrees is judged by
    /// the closest of the central, one-sided and `eps / 100` differences.
    pub kinks: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

/// Central-difference disagreement above which a coordinate is probed for a
/// kink.
const KINK_PROBE: f64 = 1e-6;

/// One-sided slopes differing by more than this multiple of `eps` indicate a
/// kink rather than curvature.
const KINK_RATIO: f64 = 10.0;

/// `|analytic - numeric| / max(1, |analytic| + |numeric|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1.0)
}

fn evaluate<F>(store: &ParamStore, f: &mut F, with_grad: bool) -> Result<(Graph, Var)>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut graph = if with_grad { Graph::new() } else { Graph::inference() };
    let out = f(&mut graph, store)?;
    if graph.value(out).numel() != 1 {
        return Err(Error::shape("gradient check needs a scalar function"));
    }
    if !graph.value(out).item().is_finite() {
        let op = graph.first_non_finite().unwrap_or("unknown");
        return Err(Error::NonFinite {
            op: op.into(),
            step: None,
        });
    }
    Ok((graph, out))
}

/// Compares reverse-mode gradients of the scalar function `f` with central
/// differences, perturbing the parameters in `store` in place (they are
/// restored afterwards).
pub fn grad_check<F>(
    store: &mut ParamStore,
    mut f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParamStore) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&opts.eps) {
        return Err(Error::param(format!("eps {} outside [1e-6, 1e-4]", opts.eps)));
    }
    store.zero_grads();
    let (graph, out) = evaluate(store, &mut f, true)?;
    let grads = graph.backward(out)?;
    grads.accumulate_into(&graph, store);
    drop(graph);

    let coords: Vec<(ParamId, usize)> = match opts.samples {
        None => store
            .ids()
            .flat_map(|id| (0..store.value(id).numel()).map(move |i| (id, i)))
            .collect(),
        Some(n) => {
            let ids: Vec<ParamId> = store.ids().filter(|&id| store.value(id).numel() > 0).collect();
            if ids.is_empty() {
                return Err(Error::Empty("no parameters to check".into()));
            }
            let mut rng = Rng::new(opts.seed);
            (0..n)
                .map(|_| {
                    let id = ids[rng.below(ids.len())];
                    (id, rng.below(store.value(id).numel()))
                })
                .collect()
        }
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        kinks: 0,
        worst: None,
    };
    for (id, i) in coords {
        let mut analytic = store.grad(id).data()[i];
        if opts.corrupt {
            analytic = analytic * 1.5 + 1e-2;
        }
        let orig = store.value(id).data()[i];
        store.value_mut(id).data_mut()[i] = orig + opts.eps;
        let plus = evaluate(store, &mut f, false).map(|(g, o)| g.value(o).item());
        store.value_mut(id).data_mut()[i] = orig - opts.eps;
        let minus = evaluate(store, &mut f, false).map(|(g, o)| g.value(o).item());
        store.value_mut(id).data_mut()[i] = orig;
        let (plus, minus) = (plus?, minus?);
        let mut err = relative_error(analytic, (plus - minus) / (2.0 * opts.eps));
        if err > KINK_PROBE {
            // A smooth function cannot disagree this much at this step size;
            // resolve a possible kink with one-sided and finer differences.
            let mut at = |store: &mut ParamStore, x: f64| {
                store.value_mut(id).data_mut()[i] = x;
                let r = evaluate(store, &mut f, false).map(|(g, o)| g.value(o).item());
                store.value_mut(id).data_mut()[i] = orig;
                r
            };
            let centre = at(store, orig)?;
            let h = opts.eps / 100.0;
            let fine = (at(store, orig + h)? - at(store, orig - h)?) / (2.0 * h);
            let left = (centre - minus) / opts.eps;
            let right = (plus - centre) / opts.eps;
            if relative_error(left, right) > KINK_RATIO * opts.eps {
                report.kinks += 1;
            }
            err = [left, right, fine]
                .into_iter()
                .map(|n| relative_error(analytic, n))
                .fold(err, f64::min);
        }
        report.checked += 1;
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((store.name(id).to_string(), i));
        }
    }
    store.zero_grads();
    Ok(report)
}

/// Result of one named check in a suite.
#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradCheckReport,
}

fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).expect("consistent shape")
}

/// Checks `sum(f(inputs) * probe)` for random inputs of the given shapes and
/// a fixed random probe, so every output element carries a distinct upstream
/// gradient.
pub fn check_op<F>(name: &str, inputs: &[Vec<usize>], seed: u64, opts: &GradCheckOptions, f: F) -> Result<SuiteEntry>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
    let ids = inputs
        .iter()
        .enumerate()
        .map(|(i, s)| store.add(format!("in{i}"), random(s, &mut rng)))
        .collect::<Result<Vec<ParamId>>>()?;
    let mut probe_rng = Rng::new(seed ^ 0xabcd);
    let mut probe: Option<Tensor> = None;
    let report = grad_check(
        &mut store,
        |g, s| {
            let vars: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
            let out = f(g, &vars)?;
            let shape = g.shape(out).to_vec();
            let p = probe.get_or_insert_with(|| random(&shape, &mut probe_rng)).clone();
            let p = g.constant(p);
            let prod = g.mul(out, p)?;
            Ok(g.sum(prod))
        },
        opts,
    )?;
    Ok(SuiteEntry {
        name: name.into(),
        report,
    })
}

/// Every differentiable primitive, checked on small random inputs.
pub fn primitive_suite(opts: &GradCheckOptions) -> Result<Vec<SuiteEntry>> {
    let causal = AttnSpec {
        batch: 2,
        q_len: 3,
        k_len: 3,
        heads: 2,
        causal: true,
        key_lens: vec![3, 2],
    };
    let cross = AttnSpec {
        batch: 2,
        q_len: 2,
        k_len: 4,
        heads: 1,
        causal: false,
        key_lens: vec![4, 1],
    };
    let s = |v: &[usize]| v.to_vec();
    Ok(vec![
        check_op("matmul", &[s(&[3, 4]), s(&[4, 2])], 1, opts, |g, v| g.matmul(v[0], v[1]))?,
        check_op("matmul_nt", &[s(&[3, 4]), s(&[5, 4])], 2, opts, |g, v| g.matmul_nt(v[0], v[1]))?,
        check_op("add_mul_scale", &[s(&[2, 3]), s(&[2, 3])], 3, opts, |g, v| {
            let a = g.add(v[0], v[1])?;
            let m = g.mul(a, v[1])?;
            Ok(g.scale(m, -1.7))
        })?,
        check_op("add_bias_relu", &[s(&[4, 3]), s(&[3])], 4, opts, |g, v| {
            let a = g.add_bias(v[0], v[1])?;
            Ok(g.relu(a))
        })?,
        check_op("layer_norm", &[s(&[3, 5]), s(&[5]), s(&[5])], 5, opts, |g, v| {
            g.layer_norm(v[0], v[1], v[2])
        })?,
        check_op("softmax_tau", &[s(&[3, 4])], 6, opts, |g, v| g.softmax(v[0], 1, 0.7))?,
        check_op("log_softmax_tau", &[s(&[3, 4])], 7, opts, |g, v| g.log_softmax(v[0], 1, 5.0))?,
        check_op("softmax_layer_axis", &[s(&[2, 3, 4])], 8, opts, |g, v| g.softmax(v[0], 1, 1.0))?,
        check_op("gather_rows", &[s(&[5, 3])], 9, opts, |g, v| g.gather_rows(v[0], &[4, 0, 4, 2]))?,
        check_op("select", &[s(&[3, 2, 4])], 10, opts, |g, v| g.select(v[0], 1))?,
        check_op("attention_causal", &[s(&[6, 4]), s(&[6, 4]), s(&[6, 4])], 11, opts, move |g, v| {
            g.attention(v[0], v[1], v[2], causal.clone())
        })?,
        check_op("attention_cross", &[s(&[4, 6]), s(&[8, 6]), s(&[8, 6])], 12, opts, move |g, v| {
            g.attention(v[0], v[1], v[2], cross.clone())
        })?,
        check_op("layer_mix", &[s(&[3, 4]), s(&[5, 4]), s(&[5, 4]), s(&[5, 4])], 13, opts, |g, v| {
            let w = g.softmax(v[0], 0, 1.0)?;
            g.layer_mix(w, &v[1..])
        })?,
        check_op("cross_entropy", &[s(&[4, 5])], 14, opts, |g, v| {
            let lp = g.log_softmax(v[0], 1, 1.0)?;
            g.cross_entropy(lp, &[1, 0, 3, 4], Some(0), 0.1)
        })?,
    ])
}

/// The model used by [`model_suite`]: two encoder and two decoder layers,
/// width 16, two heads, 32 tokens.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        encoder_layers: 2,
        decoder_layers: 2,
        d_model: 16,
        heads: 2,
        d_ff: 32,
        src_vocab: 32,
        tgt_vocab: 32,
        tie_embeddings: true,
        dropout: 0.0,
        max_len: 16,
    }
}

/// Checks the label-smoothed training loss of the tiny model in every
/// fusion mode. Layer attention runs with a fixed DropConnect mask so the
/// masked path is covered too.
pub fn model_suite(opts: &GradCheckOptions) -> Result<Vec<SuiteEntry>> {
    let config = tiny_model_config();
    let examples = gen_copy(3, 2, 5, config.src_vocab - 4, &mut Rng::new(opts.seed))?;
    let refs: Vec<_> = examples.iter().collect();
    let batch = Batch::new(&refs)?;
    let mut out = Vec::new();
    for (k, mode) in FusionMode::ALL.into_iter().enumerate() {
        let mut model = Seq2Seq::new(config.clone(), FusionConfig::new(mode), opts.seed + k as u64)?;
        // Move layer attention away from its uniform start.
        if let Some(id) = model.store.ids().find(|&i| model.store.name(i) == "fusion.weights") {
            let mut rng = Rng::new(opts.seed ^ 0x5eed);
            for x in model.store.value_mut(id).data_mut() {
                *x = rng.uniform(-1.0, 1.0);
            }
        }
        let mut store = model.store.clone();
        let report = grad_check(
            &mut store,
            |g, s| {
                for id in s.ids() {
                    model.store.value_mut(id).data_mut().copy_from_slice(s.value(id).data());
                }
                let mut rng = Rng::new(opts.seed);
                let o = model.forward(g, &batch.src, &batch.tgt_in, true, &mut rng)?;
                g.cross_entropy(o.scores, &batch.tgt_out, Some(PAD), 0.1)
            },
            opts,
        )?;
        out.push(SuiteEntry {
            name: format!("model/{}", mode.as_str()),
            report,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn sum_of_squares() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::vector(vec![1.0, 2.0])).unwrap();
        // Analytic gradient is exactly [2, 4].
        let mut g = Graph::new();
        let xv = g.param(&store, x);
        let sq = g.mul(xv, xv).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(xv).unwrap().data(), &[2.0, 4.0]);

        let report = grad_check(
            &mut store,
            |g, s| {
                let xv = g.param(s, x);
                let sq = g.mul(xv, xv)?;
                Ok(g.sum(sq))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.checked, 2);
        assert!(report.max_rel_error < 1e-8, "{report:?}");
        // Parameters are restored.
        assert_eq!(store.value(x).data(), &[1.0, 2.0]);
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::vector(vec![1.0, -2.0])).unwrap();
        let opts = GradCheckOptions {
            corrupt: true,
            ..Default::default()
        };
        let report = grad_check(
            &mut store,
            |g, s| {
                let xv = g.param(s, x);
                let sq = g.mul(xv, xv)?;
                Ok(g.sum(sq))
            },
            &opts,
        )
        .unwrap();
        assert!(report.max_rel_error > 1e-2);
    }

    #[test]
    fn eps_out_of_range_is_rejected() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::scalar(1.0)).unwrap();
        let opts = GradCheckOptions {
            eps: 1e-2,
            ..Default::default()
        };
        let err = grad_check(&mut store, |g, _| Ok(g.constant(Tensor::scalar(0.0))), &opts);
        assert!(matches!(err, Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn non_finite_loss_names_the_op() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::vector(vec![1e300, 1e300])).unwrap();
        let err = grad_check(
            &mut store,
            |g, s| {
                let xv = g.param(s, x);
                let sq = g.mul(xv, xv)?;
                Ok(g.sum(sq))
            },
            &GradCheckOptions::default(),
        )
        .unwrap_err();
        match err {
            Error::NonFinite { op, .. } => assert_eq!(op, "mul"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn primitive_suite_passes() {
        let entries = primitive_suite(&GradCheckOptions::default()).unwrap();
        assert_eq!(entries.len(), 14);
        for e in entries {
            assert!(e.report.max_rel_error < 1e-4, "{}: {:?}", e.name, e.report);
        }
    }

    #[test]
    fn primitive_suite_catches_corruption() {
        let opts = GradCheckOptions {
            corrupt: true,
            ..Default::default()
        };
        let entries = primitive_suite(&opts).unwrap();
        assert!(entries.iter().all(|e| e.report.max_rel_error > 1e-3));
    }
}
