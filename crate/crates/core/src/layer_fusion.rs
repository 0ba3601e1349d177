//! Fine-grained layer attention: every decoder layer reads its own
//! per-dimension mixture of all encoder layers instead of the final one.
//!
//! For decoder layer `m` the source is
//! `S[m][i, d] = sum_n w[m, n, d] * X[n][i, d]`, where the weights are a
//! softmax over the layer axis of a learnable `[M, N + 1, D]` tensor and
//! `X[0]` is the word embedding *without* position embeddings.

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::surface_fusion::{DropConnectTarget, FusionConfig, FusionMode};
use crate::tensor::{Rng, Tensor};
use crate::transformer::{EncoderStates, LayerOutputs};

/// Raw (pre-softmax) layer attention logits and their DropConnect rate.
#[derive(Clone, Debug)]
pub struct FusionWeights {
    pub raw: Tensor,
    pub p: f64,
}

impl FusionWeights {
    pub fn zeros(decoder_layers: usize, encoder_layers: usize, width: usize, p: f64) -> Self {
        Self {
            raw: Tensor::zeros(&[decoder_layers, encoder_layers + 1, width]),
            p,
        }
    }

    pub fn normalized(&self) -> Result<Tensor> {
        normalize_weights(&self.raw)
    }
}

/// Softmax over the layer axis, independently for every decoder layer and
/// dimension. Accepts `[M, L, D]` (fine) or `[M, L]` (coarse) logits.
pub fn normalize_weights(raw: &Tensor) -> Result<Tensor> {
    if !matches!(raw.rank(), 2 | 3) {
        return Err(Error::shape(format!(
            "layer weights must be [M, L, D] or [M, L], got {:?}",
            raw.shape()
        )));
    }
    let mut g = Graph::inference();
    let x = g.constant(raw.clone());
    let y = g.softmax(x, 1, 1.0)?;
    Ok(g.value(y).clone())
}

/// The multiplicative DropConnect mask: each entry is 0 with probability `p`,
/// otherwise `1 / (1 - p)`.
pub fn dropconnect_mask(shape: &[usize], p: f64, rng: &mut Rng) -> Result<Tensor> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::param(format!("DropConnect probability {p} not in [0, 1)")));
    }
    let n: usize = shape.iter().product();
    let keep = 1.0 / (1.0 - p);
    let data = (0..n)
        .map(|_| if rng.bernoulli(p) { 0.0 } else { keep })
        .collect();
    Tensor::new(shape, data)
}

/// Randomly zeroes entries of `weights` with probability `p` and rescales the
/// survivors by `1 / (1 - p)`. Identity outside training or when `p == 0`.
pub fn dropconnect(weights: &Tensor, p: f64, rng: &mut Rng, training: bool) -> Result<Tensor> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::param(format!("DropConnect probability {p} not in [0, 1)")));
    }
    if !training || p == 0.0 {
        return Ok(weights.clone());
    }
    let mask = dropconnect_mask(weights.shape(), p, rng)?;
    let data = weights
        .data()
        .iter()
        .zip(mask.data())
        .map(|(w, m)| w * m)
        .collect();
    Tensor::new(weights.shape(), data)
}

/// Mixes equally-shaped layers with per-layer, per-dimension weights
/// `[L, D]`: `out[i, d] = sum_l weights[l, d] * layers[l][i, d]`.
pub fn mix_layers(layers: &[&Tensor], weights: &Tensor) -> Result<Tensor> {
    let mut g = Graph::inference();
    let w = g.constant(weights.clone());
    let xs: Vec<Var> = layers.iter().map(|t| g.constant((*t).clone())).collect();
    let out = g.layer_mix(w, &xs)?;
    Ok(g.value(out).clone())
}

/// The layer stack seen by the fusion: `x_emb` in slot 0, then `X[1..=N]`.
fn fusion_stack(outputs: &LayerOutputs) -> Vec<&Tensor> {
    std::iter::once(&outputs.x_emb)
        .chain(outputs.layers.iter().skip(1))
        .collect()
}

/// Source representation for decoder layer `m` given normalized weights
/// `[M, N + 1, D]`.
pub fn fuse(outputs: &LayerOutputs, m: usize, normalized: &Tensor) -> Result<Tensor> {
    let stack = fusion_stack(outputs);
    let [mm, l, d] = *normalized.shape() else {
        return Err(Error::shape("normalized weights must be [M, L, D]"));
    };
    if m >= mm {
        return Err(Error::Index(format!("decoder layer {m} of {mm}")));
    }
    if l != stack.len() || d != outputs.x_emb.last_dim() {
        return Err(Error::shape(format!(
            "weights [{mm}, {l}, {d}] for {} layers of width {}",
            stack.len(),
            outputs.x_emb.last_dim()
        )));
    }
    let slice = Tensor::new(&[l, d], normalized.data()[m * l * d..(m + 1) * l * d].to_vec())?;
    mix_layers(&stack, &slice)
}

/// Layer attention with one scalar weight per encoder layer, shared by all
/// dimensions.
pub fn coarse_fuse(outputs: &LayerOutputs, scalars: &[f64]) -> Result<Tensor> {
    let stack = fusion_stack(outputs);
    if scalars.len() != stack.len() {
        return Err(Error::shape(format!(
            "{} scalar weights for {} layers",
            scalars.len(),
            stack.len()
        )));
    }
    let d = outputs.x_emb.last_dim();
    let data = scalars.iter().flat_map(|&s| std::iter::repeat_n(s, d)).collect();
    mix_layers(&stack, &Tensor::new(&[scalars.len(), d], data)?)
}

/// Removes layer `n` from normalized weights and renormalizes the remaining
/// layers so that they again sum to one. The layer axis is axis 1 of an
/// `[M, L, D]` or `[M, L]` tensor and axis 0 of an `[L]` or `[L, D]` one.
pub fn mask_layer(weights: &Tensor, n: usize) -> Result<Tensor> {
    let shape = weights.shape();
    let axis = if shape.len() == 3 { 1 } else { 0 };
    if shape.is_empty() || shape.len() > 3 {
        return Err(Error::shape(format!("cannot mask weights of shape {shape:?}")));
    }
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    if n >= len {
        return Err(Error::Index(format!("layer {n} of {len}")));
    }
    let src = weights.data();
    let mut out = src.to_vec();
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| o * len * inner + l * inner + i;
            if src[at(n)] == 0.0 {
                continue;
            }
            let rest: f64 = (0..len).filter(|&l| l != n).map(|l| src[at(l)]).sum();
            if !(rest > 0.0) {
                return Err(Error::DegenerateMask(format!(
                    "layer {n} carries all of the weight at position ({o}, {i})"
                )));
            }
            for l in 0..len {
                out[at(l)] = if l == n { 0.0 } else { src[at(l)] / rest };
            }
        }
    }
    Tensor::new(shape, out)
}

/// Which source each decoder layer cross-attends to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DecoderSource {
    /// The final encoder layer `X[N]`, unchanged.
    Final,
    /// A fused mixture over the listed encoder layers (0 meaning the
    /// position-free embedding), using row `slot` of the weight tensor.
    Fused { slot: usize, layers: Vec<usize> },
}

/// Per-decoder-layer wiring for a fusion mode.
pub fn wiring(mode: FusionMode, encoder_layers: usize, decoder_layers: usize) -> Vec<DecoderSource> {
    let all: Vec<usize> = (0..=encoder_layers).collect();
    match mode {
        FusionMode::Fine | FusionMode::Coarse => (0..decoder_layers)
            .map(|m| DecoderSource::Fused {
                slot: m,
                layers: all.clone(),
            })
            .collect(),
        FusionMode::FineUppermost => uppermost_only_mode(encoder_layers, decoder_layers),
        FusionMode::None | FusionMode::SurfaceHard | FusionMode::SurfaceSoft => {
            vec![DecoderSource::Final; decoder_layers]
        }
    }
}

/// Only the top decoder layer fuses, and only the embedding layer with the
/// final encoder layer; every lower decoder layer reads `X[N]` unchanged.
pub fn uppermost_only_mode(encoder_layers: usize, decoder_layers: usize) -> Vec<DecoderSource> {
    let mut out = vec![DecoderSource::Final; decoder_layers];
    if let Some(top) = out.last_mut() {
        *top = DecoderSource::Fused {
            slot: 0,
            layers: vec![0, encoder_layers],
        };
    }
    out
}

/// Learnable layer attention inside a model.
#[derive(Clone, Debug)]
pub(crate) struct LayerAttention {
    pub weights: ParamId,
    pub coarse: bool,
    pub wiring: Vec<DecoderSource>,
}

impl LayerAttention {
    /// Registers the weight tensor, initialized to zeros (uniform attention).
    pub fn new(
        store: &mut ParamStore,
        mode: FusionMode,
        encoder_layers: usize,
        decoder_layers: usize,
        width: usize,
    ) -> Result<Option<Self>> {
        let wiring = wiring(mode, encoder_layers, decoder_layers);
        let fused: Vec<&DecoderSource> = wiring
            .iter()
            .filter(|s| matches!(s, DecoderSource::Fused { .. }))
            .collect();
        let Some(DecoderSource::Fused { layers, .. }) = fused.first() else {
            return Ok(None);
        };
        let coarse = mode == FusionMode::Coarse;
        let shape = if coarse {
            vec![fused.len(), layers.len()]
        } else {
            vec![fused.len(), layers.len(), width]
        };
        let weights = store.add("fusion.weights", Tensor::zeros(&shape))?;
        Ok(Some(Self {
            weights,
            coarse,
            wiring,
        }))
    }

    /// Normalized weights, `[slots, L, D]` (coarse weights broadcast over D).
    pub fn normalized(&self, store: &ParamStore, width: usize) -> Result<Tensor> {
        let w = normalize_weights(store.value(self.weights))?;
        if !self.coarse {
            return Ok(w);
        }
        let [m, l] = *w.shape() else { unreachable!() };
        let data = w
            .data()
            .iter()
            .flat_map(|&s| std::iter::repeat_n(s, width))
            .collect();
        Tensor::new(&[m, l, width], data)
    }

    /// Builds the source representation of every decoder layer on the graph.
    /// `mask` removes one encoder layer (by encoder index) from every fused
    /// mixture; it is an evaluation-only diagnostic.
    #[allow(clippy::too_many_arguments)]
    pub fn sources(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        enc: &EncoderStates,
        fusion: &FusionConfig,
        training: bool,
        rng: &mut Rng,
        mask: Option<usize>,
    ) -> Result<Vec<Var>> {
        let width = g.value(enc.x_emb).last_dim();
        let raw = g.param(store, self.weights);
        let shape = g.shape(raw).to_vec();
        let dropping = training && fusion.p > 0.0;
        let mut logits = raw;
        if dropping && fusion.dropconnect_target == DropConnectTarget::Logits {
            let m = g.constant(dropconnect_mask(&shape, fusion.p, rng)?);
            logits = g.mul(raw, m)?;
        }
        let mut normalized = g.softmax(logits, 1, 1.0)?;
        if dropping && fusion.dropconnect_target == DropConnectTarget::Normalized {
            let m = g.constant(dropconnect_mask(&shape, fusion.p, rng)?);
            normalized = g.mul(normalized, m)?;
        }
        let top = enc.layers.len() - 1;
        let mut out = Vec::with_capacity(self.wiring.len());
        for source in &self.wiring {
            let DecoderSource::Fused { slot, layers } = source else {
                out.push(enc.layers[top]);
                continue;
            };
            let mut w = g.select(normalized, *slot)?;
            if self.coarse {
                let l = layers.len();
                let col = g.reshape(w, &[l, 1])?;
                let ones = g.constant(Tensor::full(&[1, width], 1.0));
                w = g.matmul(col, ones)?;
            }
            if let Some(n) = mask {
                if let Some(pos) = layers.iter().position(|&x| x == n) {
                    let masked = mask_layer(g.value(w), pos)?;
                    w = g.constant(masked);
                }
            }
            let xs: Vec<Var> = layers
                .iter()
                .map(|&n| if n == 0 { enc.x_emb } else { enc.layers[n] })
                .collect();
            out.push(g.layer_mix(w, &xs)?);
        }
        Ok(out)
    }
}
