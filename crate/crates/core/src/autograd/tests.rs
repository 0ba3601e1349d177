use super::*;
use crate::gradcheck::{grad_check, GradCheckOptions};
use crate::tensor::Rng;

fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
}

fn check_op<F>(inputs: &[Vec<usize>], seed: u64, f: F)
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let entry = crate::gradcheck::check_op("op", inputs, seed, &GradCheckOptions::default(), f).unwrap();
    assert!(entry.report.max_rel_error < 1e-4, "{:?}", entry.report);
}

#[test]
fn grad_matmul() {
    check_op(&[vec![3, 4], vec![4, 2]], 1, |g, v| g.matmul(v[0], v[1]));
}

#[test]
fn grad_matmul_nt() {
    check_op(&[vec![3, 4], vec![5, 4]], 2, |g, v| g.matmul_nt(v[0], v[1]));
}

#[test]
fn grad_add_mul_scale() {
    check_op(&[vec![2, 3], vec![2, 3]], 3, |g, v| {
        let a = g.add(v[0], v[1])?;
        let m = g.mul(a, v[1])?;
        Ok(g.scale(m, -1.7))
    });
}

#[test]
fn grad_add_bias_relu() {
    check_op(&[vec![4, 3], vec![3]], 4, |g, v| {
        let a = g.add_bias(v[0], v[1])?;
        Ok(g.relu(a))
    });
}

#[test]
fn grad_layer_norm() {
    check_op(&[vec![3, 5], vec![5], vec![5]], 5, |g, v| g.layer_norm(v[0], v[1], v[2]));
}

#[test]
fn grad_softmax_last_axis_with_temperature() {
    check_op(&[vec![3, 4]], 6, |g, v| g.softmax(v[0], 1, 0.7));
    check_op(&[vec![3, 4]], 7, |g, v| g.log_softmax(v[0], 1, 5.0));
}

#[test]
fn grad_softmax_middle_axis() {
    check_op(&[vec![2, 3, 4]], 8, |g, v| g.softmax(v[0], 1, 1.0));
}

#[test]
fn grad_gather_and_select() {
    check_op(&[vec![5, 3]], 9, |g, v| g.gather_rows(v[0], &[4, 0, 4, 2]));
    check_op(&[vec![3, 2, 4]], 10, |g, v| g.select(v[0], 1));
}

#[test]
fn grad_attention_causal_and_padded() {
    let spec = AttnSpec {
        batch: 2,
        q_len: 3,
        k_len: 3,
        heads: 2,
        causal: true,
        key_lens: vec![3, 2],
    };
    check_op(&[vec![6, 4], vec![6, 4], vec![6, 4]], 11, move |g, v| {
        g.attention(v[0], v[1], v[2], spec.clone())
    });
}

#[test]
fn grad_attention_cross() {
    let spec = AttnSpec {
        batch: 2,
        q_len: 2,
        k_len: 4,
        heads: 1,
        causal: false,
        key_lens: vec![4, 1],
    };
    check_op(&[vec![4, 6], vec![8, 6], vec![8, 6]], 12, move |g, v| {
        g.attention(v[0], v[1], v[2], spec.clone())
    });
}

#[test]
fn grad_layer_mix() {
    check_op(&[vec![3, 4], vec![5, 4], vec![5, 4], vec![5, 4]], 13, |g, v| {
        let w = g.softmax(v[0], 0, 1.0)?;
        g.layer_mix(w, &v[1..])
    });
}

#[test]
fn grad_cross_entropy_with_smoothing_and_pad() {
    check_op(&[vec![4, 5]], 14, |g, v| {
        let lp = g.log_softmax(v[0], 1, 1.0)?;
        g.cross_entropy(lp, &[1, 0, 3, 4], Some(0), 0.1)
    });
}

#[test]
fn softmax_temp_then_cross_entropy_composite() {
    let mut rng = Rng::new(15);
    let mut store = ParamStore::new();
    let x = store.add("x", random(&[3, 6], &mut rng)).unwrap();
    let report = grad_check(
        &mut store,
        |g, s| {
            let xv = g.param(s, x);
            let lp = g.log_softmax(xv, 1, 2.5)?;
            g.cross_entropy(lp, &[2, 5, 1], Some(0), 0.0)
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn diamond_graph_accumulates_both_paths() {
    // y = x * x + 3x  =>  dy/dx = 2x + 3
    let mut g = Graph::new();
    let x = g.input(Tensor::vector(vec![2.0, -1.0]));
    let sq = g.mul(x, x).unwrap();
    let lin = g.scale(x, 3.0);
    let y = g.add(sq, lin).unwrap();
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[7.0, 1.0]);
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let x = g.input(Tensor::vector(vec![1.0]));
    let c = g.constant(Tensor::vector(vec![5.0]));
    let m = g.mul(x, c).unwrap();
    let s = g.sum(m);
    let grads = g.backward(s).unwrap();
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(x).unwrap().data(), &[5.0]);
}

#[test]
fn tied_parameter_is_one_node() {
    let mut store = ParamStore::new();
    let e = store.add("emb", Tensor::vector(vec![1.0, 2.0])).unwrap();
    let mut g = Graph::new();
    let a = g.param(&store, e);
    let b = g.param(&store, e);
    assert_eq!(a, b);
    let m = g.mul(a, b).unwrap();
    let s = g.sum(m);
    let grads = g.backward(s).unwrap();
    grads.accumulate_into(&g, &mut store);
    assert_eq!(store.grad(e).data(), &[2.0, 4.0]);
}

#[test]
fn attention_with_single_key_returns_value() {
    let mut g = Graph::inference();
    let q = g.constant(Tensor::new(&[1, 2], vec![3.0, -7.0]).unwrap());
    let k = g.constant(Tensor::new(&[1, 2], vec![0.3, 0.1]).unwrap());
    let v = g.constant(Tensor::new(&[1, 2], vec![4.0, 5.0]).unwrap());
    let spec = AttnSpec {
        batch: 1,
        q_len: 1,
        k_len: 1,
        heads: 1,
        causal: false,
        key_lens: vec![1],
    };
    let out = g.attention(q, k, v, spec).unwrap();
    assert_eq!(g.value(out).data(), &[4.0, 5.0]);
}

#[test]
fn attention_rejects_fully_masked_rows() {
    let mut g = Graph::inference();
    let q = g.constant(Tensor::zeros(&[1, 2]));
    let k = g.constant(Tensor::zeros(&[1, 2]));
    let spec = AttnSpec {
        batch: 1,
        q_len: 1,
        k_len: 1,
        heads: 1,
        causal: false,
        key_lens: vec![0],
    };
    assert!(matches!(g.attention(q, k, k, spec), Err(Error::Empty(_))));
}
