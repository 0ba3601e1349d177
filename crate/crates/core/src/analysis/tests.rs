use super::report::pgm;
use super::*;
use crate::data::{gen_copy, Example};
use crate::surface_fusion::{FusionConfig, FusionMode};
use crate::transformer::ModelConfig;
use nalgebra::DMatrix;

fn config(n: usize, m: usize, d: usize) -> ModelConfig {
    ModelConfig {
        encoder_layers: n,
        decoder_layers: m,
        d_model: d,
        heads: 2,
        d_ff: 2 * d,
        src_vocab: 12,
        tgt_vocab: 12,
        tie_embeddings: true,
        dropout: 0.0,
        max_len: 16,
    }
}

fn model(mode: FusionMode) -> Seq2Seq {
    Seq2Seq::new(config(3, 2, 8), FusionConfig::new(mode), 7).unwrap()
}

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    Tensor::new(&[rows, cols], (0..rows * cols).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
}

/// Square roots of the Gram matrix eigenvalues, descending.
fn gram_oracle(t: &Tensor) -> Vec<f64> {
    let [r, c] = *t.shape() else { unreachable!() };
    let a = DMatrix::from_row_slice(r, c, t.data());
    let gram = if r >= c { a.transpose() * &a } else { &a * a.transpose() };
    let mut ev: Vec<f64> = gram.symmetric_eigen().eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

#[test]
fn zero_weights_give_uniform_heatmap() {
    let report = heatmap(&model(FusionMode::Fine)).unwrap();
    assert_eq!(report.cols, vec!["emb", "1", "2", "3"]);
    assert_eq!(report.rows, vec!["1", "2"]);
    for row in &report.matrix {
        for &v in row {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }
}

#[test]
fn one_hot_weights_select_a_column() {
    let (m, l, d) = (2, 4, 3);
    let mut w = Tensor::zeros(&[m, l, d]);
    for i in 0..m {
        for k in 0..d {
            w.set(&[i, l - 1, k], 1.0);
        }
    }
    let means = mean_over_dims(&w).unwrap();
    assert!(means.iter().all(|r| r == &vec![0.0, 0.0, 0.0, 1.0]));
}

#[test]
fn heatmap_rows_sum_to_one_after_training_like_updates() {
    let mut mdl = model(FusionMode::Fine);
    let id = mdl.store.ids().find(|&i| mdl.store.name(i) == "fusion.weights").unwrap();
    let mut rng = Rng::new(3);
    for x in mdl.store.value_mut(id).data_mut() {
        *x = rng.uniform(-4.0, 4.0);
    }
    for row in heatmap(&mdl).unwrap().matrix {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn uppermost_heatmap_and_mode_mismatch() {
    let report = heatmap(&model(FusionMode::FineUppermost)).unwrap();
    assert_eq!(report.matrix[0], vec![0.0, 0.0, 0.0, 1.0]);
    assert_eq!(report.matrix[1], vec![0.5, 0.0, 0.0, 0.5]);
    for mode in [FusionMode::None, FusionMode::SurfaceSoft] {
        assert!(matches!(heatmap(&model(mode)), Err(Error::ModeMismatch(_))));
    }
}

fn eval_set() -> Vec<Example> {
    gen_copy(6, 2, 5, 8, &mut Rng::new(5)).unwrap()
}

#[test]
fn mask_sweep_control_matches_baseline() {
    let mdl = model(FusionMode::Fine);
    let report = mask_sweep(&mdl, &eval_set(), 64, &DecodeConfig::default()).unwrap();
    assert_eq!(report.layers.len(), 4);
    assert_eq!(report.layers[0].layer, "emb");
    let (b, c) = (&report.baseline, &report.control);
    assert_eq!(b.token_acc, c.token_acc);
    assert_eq!(b.bleu, c.bleu);
    assert_eq!(b.mean_len, c.mean_len);
    if c.token_acc != Some(0.0) {
        assert_eq!(c.rel_acc, Some(0.0));
    }
    assert!(report.layers.iter().all(|r| r.error.is_none()));
}

#[test]
fn mask_sweep_reports_degenerate_layers() {
    let mut mdl = model(FusionMode::Fine);
    let id = mdl.store.ids().find(|&i| mdl.store.name(i) == "fusion.weights").unwrap();
    // All weight on the top layer: masking it leaves nothing to renormalize.
    let shape = mdl.store.value(id).shape().to_vec();
    for i in 0..shape[0] {
        for k in 0..shape[2] {
            mdl.store.value_mut(id).set(&[i, 3, k], 1e4);
        }
    }
    let report = mask_sweep(&mdl, &eval_set(), 64, &DecodeConfig::default()).unwrap();
    assert!(report.layers[3].error.as_deref().unwrap().contains("degenerate"));
    assert!(report.layers[0].error.is_none());
    assert!(matches!(
        mask_sweep(&model(FusionMode::None), &eval_set(), 64, &DecodeConfig::default()),
        Err(Error::ModeMismatch(_))
    ));
}

#[test]
fn identity_spectrum_is_flat() {
    let mut eye = Tensor::zeros(&[4, 4]);
    for i in 0..4 {
        eye.set(&[i, i], 1.0);
    }
    let r = svd_spectrum(&eye, SpectrumLabel::FullEmbedding).unwrap();
    assert_eq!(r.sigma, vec![1.0; 4]);
    assert_eq!(r.log_sigma, vec![0.0; 4]);
    assert_eq!(r.log_sum, 0.0);
}

#[test]
fn rank_one_spectrum() {
    let u = [1.0, -2.0, 0.5, 3.0, 1.5];
    let v = [2.0, 1.0, -1.0];
    let t = Tensor::new(&[5, 3], u.iter().flat_map(|a| v.iter().map(move |b| a * b)).collect()).unwrap();
    let (sigma, _) = normalized_spectrum(&t).unwrap();
    assert_eq!(sigma[0], 1.0);
    assert!(sigma[1..].iter().all(|&s| s < 1e-12), "{sigma:?}");
}

#[test]
fn matches_gram_oracle() {
    for (i, &(r, c)) in [(50, 16), (16, 50), (7, 7), (128, 128), (64, 128)].iter().enumerate() {
        let t = random_matrix(r, c, 100 + i as u64);
        let ours = singular_values(&t).unwrap();
        let oracle = gram_oracle(&t);
        assert_eq!(ours.len(), r.min(c));
        for (a, b) in ours.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-8, "{r}x{c}: {a} vs {b}");
        }
    }
}

#[test]
fn spectrum_is_monotone_and_normalization_idempotent() {
    let t = random_matrix(20, 10, 9);
    let (sigma, logs) = normalized_spectrum(&t).unwrap();
    assert_eq!(sigma[0], 1.0);
    assert!(sigma.windows(2).all(|w| w[0] >= w[1]));
    assert!(logs.iter().all(|&l| l <= 0.0));
    let mut diag = Tensor::zeros(&[10, 10]);
    for (i, &s) in sigma.iter().enumerate() {
        diag.set(&[i, i], s);
    }
    let (again, _) = normalized_spectrum(&diag).unwrap();
    for (a, b) in again.iter().zip(&sigma) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn split_rules() {
    let uniform = split_dims_by_attention(&[0.25; 6], 0).unwrap();
    assert_eq!(uniform.more_attended, vec![0, 1, 2]);
    assert_eq!(uniform.less_attended, vec![3, 4, 5]);
    let decreasing = split_dims_by_attention(&[0.6, 0.5, 0.4, 0.3], 0).unwrap();
    assert_eq!(decreasing.more_attended, vec![0, 1]);
    let increasing = split_dims_by_attention(&[0.1, 0.2, 0.3, 0.4], 0).unwrap();
    assert_eq!(increasing.more_attended, vec![3, 2]);
    assert!(split_dims_by_attention(&[0.1, 0.2, 0.3], 0).is_err());
    let a = split_dims_by_attention(&[0.0; 16], 4).unwrap();
    let b = split_dims_by_attention(&[0.0; 16], 4).unwrap();
    assert_eq!(a.random, b.random);
    assert_eq!(a.random.len(), 8);
    assert!(a.random.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn expressivity_reports_four_spectra() {
    let mdl = model(FusionMode::Fine);
    let reports = expressivity(&mdl, 2, 1).unwrap();
    let labels: Vec<_> = reports.iter().map(|r| r.label).collect();
    assert_eq!(
        labels,
        vec![
            SpectrumLabel::FullEmbedding,
            SpectrumLabel::MoreAttended,
            SpectrumLabel::Random,
            SpectrumLabel::LessAttended
        ]
    );
    assert_eq!(reports[0].sigma.len(), 8);
    assert_eq!(reports[1].sigma.len(), 4);
    assert!(embedding_attention(&mdl, 3).is_err());
    let upper = model(FusionMode::FineUppermost);
    assert!(embedding_attention(&upper, 2).is_ok());
    assert!(matches!(embedding_attention(&upper, 1), Err(Error::ModeMismatch(_))));
}

#[test]
fn cosine_examples() {
    let src = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.3, 0.4]]).unwrap();
    let tgt = Tensor::from_rows(&[vec![0.0, 2.0], vec![0.6, 0.8]]).unwrap();
    assert!((embed_cosine(&src, &tgt, &[(1, 1)]).unwrap() - 1.0).abs() < 1e-15);
    assert_eq!(embed_cosine(&src, &tgt, &[(0, 0)]).unwrap(), 0.0);
    assert!((embed_cosine(&src, &tgt, &[(0, 0), (1, 1)]).unwrap() - 0.5).abs() < 1e-15);
    assert!(matches!(embed_cosine(&src, &tgt, &[]), Err(Error::Empty(_))));
    assert!(embed_cosine(&src, &tgt, &[(2, 0)]).is_err());
}

#[test]
fn non_shared_split_compares_words() {
    let src = Vocabulary::from_tokens(["a", "b", "c"]);
    let tgt = Vocabulary::from_tokens(["c", "b", "a"]);
    let pairs = vec![(src.id("a"), tgt.id("b")), (src.id("b"), tgt.id("b")), (src.id("c"), tgt.id("a"))];
    assert_eq!(split_pairs(&pairs, &src, &tgt, Split::All).len(), 3);
    let kept = split_pairs(&pairs, &src, &tgt, Split::NonShared);
    assert_eq!(kept, vec![pairs[0], pairs[2]]);
    assert_eq!("non-shared".parse::<Split>().unwrap(), Split::NonShared);
    assert!("some".parse::<Split>().is_err());
}

#[test]
fn token_scores_by_mode() {
    let ex = Example {
        src: vec![4, 5, 6],
        tgt: vec![7, 8],
    };
    let plain = token_scores(&model(FusionMode::None), &ex).unwrap();
    assert_eq!(plain.tokens, vec![7, 8, crate::data::EOS]);
    assert_eq!(plain.fused, plain.base);
    assert!(plain.surface.is_none());
    let soft = token_scores(&model(FusionMode::SurfaceSoft), &ex).unwrap();
    assert_eq!(soft.surface.as_ref().unwrap().len(), 3);
    assert!(soft.fused.iter().all(|&s| s <= 0.0));
}

#[test]
fn writers() {
    assert_eq!(pgm(&[vec![0.0, 1.0], vec![0.5, 2.0]]).unwrap(), "P2\n2 2\n255\n0 255\n128 255\n");
    assert!(pgm(&[vec![0.0], vec![]]).is_err());
    let dir = tempfile::tempdir().unwrap();
    let report = svd_spectrum(&random_matrix(4, 3, 1), SpectrumLabel::Random).unwrap();
    let path = dir.path().join("s.csv");
    write_spectrum_csv(&path, &report).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("index,sigma,log_sigma\n0,1.0,0.0\n"), "{text}");
    assert_eq!(text.lines().count(), 4);
    let t = random_matrix(2, 3, 2);
    let dump = TensorDump::from(&t);
    let back: Tensor = serde_json::from_str::<TensorDump>(&serde_json::to_string(&dump).unwrap())
        .unwrap()
        .try_into()
        .unwrap();
    assert_eq!(back, t);
}
