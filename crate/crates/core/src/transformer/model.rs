use crate::autograd::{AttnSpec, Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::layer_fusion::{dropconnect_mask, DecoderSource, LayerAttention};
use crate::surface_fusion::{hard_fuse_var, soft_fuse_var, FusionConfig, FusionMode, SurfaceHead};
use crate::tensor::{kernels, Rng, Tensor};

use super::{sinusoidal_positions, EncoderStates, LayerOutputs, Linear, ModelConfig, MultiHeadAttention, Padded};

#[derive(Clone, Debug)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[width], 1.0))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[width]))?,
        })
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias)
    }
}

#[derive(Clone, Debug)]
struct FeedForward {
    inner: Linear,
    outer: Linear,
}

impl FeedForward {
    fn new(store: &mut ParamStore, name: &str, width: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            inner: Linear::new(store, &format!("{name}.inner"), width, hidden, rng)?,
            outer: Linear::new(store, &format!("{name}.outer"), hidden, width, rng)?,
        })
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.inner.forward(g, store, x)?;
        let h = g.relu(h);
        self.outer.forward(g, store, h)
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    attn: MultiHeadAttention,
    norm1: Norm,
    ffn: FeedForward,
    norm2: Norm,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_attn: MultiHeadAttention,
    norm1: Norm,
    cross_attn: MultiHeadAttention,
    norm2: Norm,
    ffn: FeedForward,
    norm3: Norm,
}

/// Graph handles of one forward pass through the output head.
#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    /// Per-token log-scores used for the loss and for decoding.
    pub scores: Var,
    /// Decoder pre-softmax logits `E`.
    pub logits: Var,
    /// Decoder log-distribution `log P(y_j | y_<j, x)`.
    pub base: Var,
    /// Surface log-distribution `log P(y_j | x)` in surface modes.
    pub surface: Option<Var>,
}

/// The encoder-decoder model with its parameters and fusion settings.
#[derive(Clone, Debug)]
pub struct Seq2Seq {
    pub config: ModelConfig,
    pub fusion: FusionConfig,
    pub store: ParamStore,
    /// Evaluation diagnostic: removes encoder layer `n` (0 being the
    /// embedding layer) from every fused source and renormalizes.
    pub fusion_mask: Option<usize>,
    src_embed: ParamId,
    tgt_embed: ParamId,
    output_proj: ParamId,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    layer_attention: Option<LayerAttention>,
    surface: Option<SurfaceHead>,
    positions: Tensor,
}

fn embedding_table(rows: usize, width: usize, rng: &mut Rng) -> Tensor {
    let data = (0..rows * width).map(|_| rng.uniform(-0.1, 0.1)).collect();
    Tensor::new(&[rows, width], data).expect("consistent shape")
}

fn dropout(g: &mut Graph, x: Var, p: f64, training: bool, rng: &mut Rng) -> Result<Var> {
    if !training || p == 0.0 {
        return Ok(x);
    }
    let mask = dropconnect_mask(g.shape(x), p, rng)?;
    let m = g.constant(mask);
    g.mul(x, m)
}

impl Seq2Seq {
    /// Builds a freshly initialized model. Core parameters, fusion weights
    /// and the surface head draw from independent streams, so the core of a
    /// fused model is initialized exactly like the plain model with the same
    /// seed.
    pub fn new(config: ModelConfig, fusion: FusionConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        fusion.validate()?;
        let d = config.d_model;
        let mut store = ParamStore::new();
        let mut rng = Rng::derive(seed, 0);

        let (src_embed, tgt_embed, output_proj) = if config.tie_embeddings {
            let e = store.add("embed", embedding_table(config.src_vocab, d, &mut rng))?;
            (e, e, e)
        } else {
            let s = store.add("encoder.embed", embedding_table(config.src_vocab, d, &mut rng))?;
            let t = store.add("decoder.embed", embedding_table(config.tgt_vocab, d, &mut rng))?;
            let o = store.add("decoder.output_proj", embedding_table(config.tgt_vocab, d, &mut rng))?;
            (s, t, o)
        };

        let mut encoder = Vec::with_capacity(config.encoder_layers);
        for n in 0..config.encoder_layers {
            let name = format!("encoder.{n}");
            encoder.push(EncoderLayer {
                attn: MultiHeadAttention::new(&mut store, &format!("{name}.self_attn"), d, config.heads, &mut rng)?,
                norm1: Norm::new(&mut store, &format!("{name}.norm1"), d)?,
                ffn: FeedForward::new(&mut store, &format!("{name}.ffn"), d, config.d_ff, &mut rng)?,
                norm2: Norm::new(&mut store, &format!("{name}.norm2"), d)?,
            });
        }
        let mut decoder = Vec::with_capacity(config.decoder_layers);
        for m in 0..config.decoder_layers {
            let name = format!("decoder.{m}");
            decoder.push(DecoderLayer {
                self_attn: MultiHeadAttention::new(&mut store, &format!("{name}.self_attn"), d, config.heads, &mut rng)?,
                norm1: Norm::new(&mut store, &format!("{name}.norm1"), d)?,
                cross_attn: MultiHeadAttention::new(&mut store, &format!("{name}.cross_attn"), d, config.heads, &mut rng)?,
                norm2: Norm::new(&mut store, &format!("{name}.norm2"), d)?,
                ffn: FeedForward::new(&mut store, &format!("{name}.ffn"), d, config.d_ff, &mut rng)?,
                norm3: Norm::new(&mut store, &format!("{name}.norm3"), d)?,
            });
        }

        let layer_attention = LayerAttention::new(
            &mut store,
            fusion.mode,
            config.encoder_layers,
            config.decoder_layers,
            d,
        )?;
        let surface = if fusion.mode.is_surface() {
            let mut rng = Rng::derive(seed, 1);
            Some(SurfaceHead::new(&mut store, d, config.heads, &mut rng)?)
        } else {
            None
        };
        let positions = sinusoidal_positions(config.max_len, d);
        Ok(Self {
            config,
            fusion,
            store,
            fusion_mask: None,
            src_embed,
            tgt_embed,
            output_proj,
            encoder,
            decoder,
            layer_attention,
            surface,
            positions,
        })
    }

    pub fn src_embedding_id(&self) -> ParamId {
        self.src_embed
    }

    pub fn tgt_embedding_id(&self) -> ParamId {
        self.tgt_embed
    }

    /// The pre-softmax weight `V`, stored as `[tgt_vocab, D]`.
    pub fn output_proj_id(&self) -> ParamId {
        self.output_proj
    }

    pub fn src_embedding(&self) -> &Tensor {
        self.store.value(self.src_embed)
    }

    pub fn tgt_embedding(&self) -> &Tensor {
        self.store.value(self.tgt_embed)
    }

    /// Per-decoder-layer source wiring, or `None` without layer attention.
    pub fn fusion_wiring(&self) -> Option<&[DecoderSource]> {
        self.layer_attention.as_ref().map(|la| la.wiring.as_slice())
    }

    /// Normalized layer attention weights `[slots, L, D]` (one slot per
    /// fused decoder layer).
    pub fn layer_weights(&self) -> Result<Tensor> {
        match &self.layer_attention {
            Some(la) => la.normalized(&self.store, self.config.d_model),
            None => Err(Error::ModeMismatch(format!(
                "fusion mode `{}` has no layer attention",
                self.fusion.mode.as_str()
            ))),
        }
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len > self.config.max_len {
            return Err(Error::Length {
                len,
                max: self.config.max_len,
            });
        }
        Ok(())
    }

    /// Scaled word embeddings and their sum with position embeddings for
    /// `batch` rows of `len` tokens starting at position `offset`.
    fn embed(
        &self,
        g: &mut Graph,
        table: ParamId,
        tokens: &[usize],
        batch: usize,
        len: usize,
        offset: usize,
    ) -> Result<(Var, Var)> {
        self.check_len(offset + len)?;
        let t = g.param(&self.store, table);
        let e = g.gather_rows(t, tokens)?;
        let x_emb = g.scale(e, (self.config.d_model as f64).sqrt());
        let width = self.config.d_model;
        let mut pe = Vec::with_capacity(batch * len * width);
        for _ in 0..batch {
            for pos in offset..offset + len {
                pe.extend_from_slice(self.positions.row(pos));
            }
        }
        let pe = g.constant(Tensor::new(&[batch * len, width], pe)?);
        let x0 = g.add(x_emb, pe)?;
        Ok((x_emb, x0))
    }

    /// Runs the encoder on a padded batch.
    pub fn encode_graph(&self, g: &mut Graph, src: &Padded, training: bool, rng: &mut Rng) -> Result<EncoderStates> {
        let p = self.config.dropout;
        let (x_emb, x0) = self.embed(g, self.src_embed, &src.tokens, src.batch, src.len, 0)?;
        let mut layers = vec![x0];
        let mut x = dropout(g, x0, p, training, rng)?;
        for layer in &self.encoder {
            let spec = AttnSpec {
                batch: src.batch,
                q_len: src.len,
                k_len: src.len,
                heads: self.config.heads,
                causal: false,
                key_lens: src.lens.clone(),
            };
            let a = layer.attn.forward(g, &self.store, x, x, x, spec)?;
            let a = dropout(g, a, p, training, rng)?;
            let r = g.add(x, a)?;
            x = layer.norm1.forward(g, &self.store, r)?;
            let f = layer.ffn.forward(g, &self.store, x)?;
            let f = dropout(g, f, p, training, rng)?;
            let r = g.add(x, f)?;
            x = layer.norm2.forward(g, &self.store, r)?;
            layers.push(x);
        }
        Ok(EncoderStates {
            layers,
            x_emb,
            batch: src.batch,
            len: src.len,
            lens: src.lens.clone(),
        })
    }

    /// Encodes one sentence in evaluation mode.
    pub fn encode(&self, tokens: &[usize]) -> Result<LayerOutputs> {
        let src = Padded::new(&[tokens])?;
        self.check_len(src.len)?;
        let mut g = Graph::inference();
        let mut rng = Rng::new(0);
        let enc = self.encode_graph(&mut g, &src, false, &mut rng)?;
        Ok(LayerOutputs {
            layers: enc.layers.iter().map(|&v| g.value(v).clone()).collect(),
            x_emb: g.value(enc.x_emb).clone(),
            src_len: tokens.len(),
        })
    }

    /// The source representation each decoder layer cross-attends to.
    pub fn decoder_sources(
        &self,
        g: &mut Graph,
        enc: &EncoderStates,
        training: bool,
        rng: &mut Rng,
    ) -> Result<Vec<Var>> {
        match &self.layer_attention {
            Some(la) => la.sources(g, &self.store, enc, &self.fusion, training, rng, self.fusion_mask),
            None => Ok(vec![*enc.layers.last().unwrap(); self.decoder.len()]),
        }
    }

    fn cross_spec(&self, enc_batch: usize, q_len: usize, k_len: usize, lens: &[usize]) -> AttnSpec {
        AttnSpec {
            batch: enc_batch,
            q_len,
            k_len,
            heads: self.config.heads,
            causal: false,
            key_lens: lens.to_vec(),
        }
    }

    /// Teacher-forced forward pass: `tgt_in` starts with BOS.
    pub fn forward(
        &self,
        g: &mut Graph,
        src: &Padded,
        tgt_in: &Padded,
        training: bool,
        rng: &mut Rng,
    ) -> Result<Outputs> {
        if src.batch != tgt_in.batch {
            return Err(Error::shape(format!(
                "{} sources for {} targets",
                src.batch, tgt_in.batch
            )));
        }
        let p = self.config.dropout;
        let enc = self.encode_graph(g, src, training, rng)?;
        let sources = self.decoder_sources(g, &enc, training, rng)?;
        let (_, y0) = self.embed(g, self.tgt_embed, &tgt_in.tokens, tgt_in.batch, tgt_in.len, 0)?;
        let mut y = dropout(g, y0, p, training, rng)?;
        for (layer, &source) in self.decoder.iter().zip(&sources) {
            let spec = AttnSpec {
                batch: tgt_in.batch,
                q_len: tgt_in.len,
                k_len: tgt_in.len,
                heads: self.config.heads,
                causal: true,
                key_lens: tgt_in.lens.clone(),
            };
            let a = layer.self_attn.forward(g, &self.store, y, y, y, spec)?;
            let a = dropout(g, a, p, training, rng)?;
            let r = g.add(y, a)?;
            y = layer.norm1.forward(g, &self.store, r)?;
            let spec = self.cross_spec(src.batch, tgt_in.len, src.len, &src.lens);
            let c = layer.cross_attn.forward(g, &self.store, y, source, source, spec)?;
            let c = dropout(g, c, p, training, rng)?;
            let r = g.add(y, c)?;
            y = layer.norm2.forward(g, &self.store, r)?;
            let f = layer.ffn.forward(g, &self.store, y)?;
            let f = dropout(g, f, p, training, rng)?;
            let r = g.add(y, f)?;
            y = layer.norm3.forward(g, &self.store, r)?;
        }
        let surface_kv = match &self.surface {
            Some(head) => {
                let top = *enc.layers.last().unwrap();
                Some(head.project_source(g, &self.store, top, enc.x_emb)?)
            }
            None => None,
        };
        let spec = self.cross_spec(src.batch, tgt_in.len, src.len, &src.lens);
        self.head(g, y, surface_kv, spec)
    }

    /// Output layer: decoder distribution, optional surface distribution and
    /// their fusion.
    fn head(&self, g: &mut Graph, top: Var, surface_kv: Option<(Var, Var)>, spec: AttnSpec) -> Result<Outputs> {
        let table = g.param(&self.store, self.output_proj);
        let logits = g.matmul_nt(top, table)?;
        let base = g.log_softmax(logits, 1, 1.0)?;
        let surface = match (&self.surface, surface_kv) {
            (Some(head), Some(kv)) => {
                let r = head.represent(g, &self.store, top, kv, spec)?;
                Some(head.log_probability(g, &self.store, r, self.output_proj, self.fusion.tau())?)
            }
            _ => None,
        };
        self.fuse_outputs(g, logits, base, surface)
    }

    fn fuse_outputs(&self, g: &mut Graph, logits: Var, base: Var, surface: Option<Var>) -> Result<Outputs> {
        let Some(surface) = surface else {
            return Ok(Outputs {
                scores: base,
                logits,
                base,
                surface: None,
            });
        };
        let scores = match self.fusion.mode {
            FusionMode::SurfaceHard => {
                let fused = hard_fuse_var(g, base, surface, self.fusion.lambda)?;
                if self.fusion.renormalize {
                    g.log_softmax(fused, 1, 1.0)?
                } else {
                    fused
                }
            }
            _ => soft_fuse_var(g, logits, surface)?,
        };
        Ok(Outputs {
            scores,
            logits,
            base,
            surface: Some(surface),
        })
    }

    /// Teacher-forced evaluation; returns the graph holding every value.
    pub fn evaluate(&self, src: &Padded, tgt_in: &Padded) -> Result<(Graph, Outputs)> {
        let mut g = Graph::inference();
        let mut rng = Rng::new(0);
        let out = self.forward(&mut g, src, tgt_in, false, &mut rng)?;
        Ok((g, out))
    }

    /// Per-position scores `[J, V]` for one sentence and a BOS-initial prefix.
    pub fn score_prefix(&self, src: &[usize], prefix: &[usize]) -> Result<Tensor> {
        let (g, out) = self.evaluate(&Padded::new(&[src])?, &Padded::new(&[prefix])?)?;
        Ok(g.value(out.scores).clone())
    }

    /// Folds the surface value path into vocabulary space for each distinct
    /// source token: the values are scaled token embeddings, so
    /// `(v W_o + b_o) V^T` splits into per-head rows `v_h W_o[h] V^T` plus the
    /// constant `b_o V^T`.
    fn fold_surface_values(&self, head: &SurfaceHead, tokens: &[usize]) -> Result<SurfaceValues> {
        let mut distinct = tokens.to_vec();
        distinct.sort_unstable();
        distinct.dedup();
        let slots = tokens
            .iter()
            .map(|t| distinct.binary_search(t).expect("token is listed"))
            .collect();
        let mut g = Graph::inference();
        let (x_emb, _) = self.embed(&mut g, self.src_embed, &distinct, distinct.len(), 1, 0)?;
        let values = head.attention.value.forward(&mut g, &self.store, x_emb)?;
        let values = g.value(values);

        let (d, heads) = (self.config.d_model, head.attention.heads);
        let dh = d / heads;
        let table = self.store.value(self.output_proj).transpose()?;
        let vocab = table.last_dim();
        let to_vocab = self.store.value(head.attention.output.weight).matmul(&table)?;
        let bias = Tensor::new(&[1, d], self.store.value(head.attention.output.bias).data().to_vec())?;
        let bias = bias.matmul(&table)?.into_data();
        let mut rows = vec![0.0; distinct.len() * heads * vocab];
        for t in 0..distinct.len() {
            let v = values.row(t);
            for h in 0..heads {
                let out = &mut rows[(t * heads + h) * vocab..][..vocab];
                for (k, &x) in v[h * dh..(h + 1) * dh].iter().enumerate() {
                    for (o, &w) in out.iter_mut().zip(to_vocab.row(h * dh + k)) {
                        *o += x * w;
                    }
                }
            }
        }
        Ok(SurfaceValues::Folded {
            slots,
            rows: Tensor::new(&[distinct.len() * heads, vocab], rows)?,
            bias,
        })
    }

    /// Encodes a batch of sources and caches everything that stays fixed
    /// while decoding: the projected cross-attention keys and values of every
    /// decoder layer and those of the surface head.
    pub fn start_decode<S: AsRef<[usize]>>(&self, sources: &[S]) -> Result<DecodeState> {
        let src = Padded::new(sources)?;
        let mut g = Graph::inference();
        let mut rng = Rng::new(0);
        let enc = self.encode_graph(&mut g, &src, false, &mut rng)?;
        let fused = self.decoder_sources(&mut g, &enc, false, &mut rng)?;
        let mut cross = Vec::with_capacity(self.decoder.len());
        for (layer, &s) in self.decoder.iter().zip(&fused) {
            let (k, v) = layer.cross_attn.project_kv(&mut g, &self.store, s, s)?;
            cross.push((g.value(k).clone(), g.value(v).clone()));
        }
        let surface = match &self.surface {
            Some(head) => {
                let top = *enc.layers.last().unwrap();
                let keys = head.attention.key.forward(&mut g, &self.store, top)?;
                // Folding pays off while a step's per-head source rows are
                // fewer than the dimensions of one output projection.
                let values = if head.attention.heads * src.len <= self.config.d_model {
                    self.fold_surface_values(head, &src.tokens)?
                } else {
                    let v = head.attention.value.forward(&mut g, &self.store, enc.x_emb)?;
                    SurfaceValues::Projected(g.value(v).clone())
                };
                Some(SurfaceCache {
                    keys: g.value(keys).clone(),
                    values,
                })
            }
            None => None,
        };
        let layers = self.decoder.len();
        Ok(DecodeState {
            batch: src.batch,
            src_len: src.len,
            src_lens: src.lens,
            cross,
            surface,
            self_k: vec![vec![Vec::new(); src.batch]; layers],
            self_v: vec![vec![Vec::new(); src.batch]; layers],
            steps: 0,
        })
    }

    /// Feeds one token per batch entry and returns the scores `[batch, V]`
    /// of the next token.
    pub fn step(&self, state: &mut DecodeState, tokens: &[usize]) -> Result<Tensor> {
        if tokens.len() != state.batch {
            return Err(Error::shape(format!(
                "{} tokens for a decode batch of {}",
                tokens.len(),
                state.batch
            )));
        }
        let (b, d, pos) = (state.batch, self.config.d_model, state.steps);
        let mut g = Graph::inference();
        let (_, mut y) = self.embed(&mut g, self.tgt_embed, tokens, b, 1, pos)?;
        let t = pos + 1;
        for (l, layer) in self.decoder.iter().enumerate() {
            let k_new = layer.self_attn.key.forward(&mut g, &self.store, y)?;
            let v_new = layer.self_attn.value.forward(&mut g, &self.store, y)?;
            for i in 0..b {
                state.self_k[l][i].extend_from_slice(g.value(k_new).row(i));
                state.self_v[l][i].extend_from_slice(g.value(v_new).row(i));
            }
            let kc = g.constant(Tensor::new(&[b * t, d], state.self_k[l].concat())?);
            let vc = g.constant(Tensor::new(&[b * t, d], state.self_v[l].concat())?);
            let spec = AttnSpec {
                batch: b,
                q_len: 1,
                k_len: t,
                heads: self.config.heads,
                causal: false,
                key_lens: vec![t; b],
            };
            let a = layer.self_attn.attend(&mut g, &self.store, y, kc, vc, spec)?;
            let r = g.add(y, a)?;
            y = layer.norm1.forward(&mut g, &self.store, r)?;
            let (ck, cv) = &state.cross[l];
            let (ck, cv) = (g.constant(ck.clone()), g.constant(cv.clone()));
            let spec = self.cross_spec(b, 1, state.src_len, &state.src_lens);
            let c = layer.cross_attn.attend(&mut g, &self.store, y, ck, cv, spec)?;
            let r = g.add(y, c)?;
            y = layer.norm2.forward(&mut g, &self.store, r)?;
            let f = layer.ffn.forward(&mut g, &self.store, y)?;
            let r = g.add(y, f)?;
            y = layer.norm3.forward(&mut g, &self.store, r)?;
        }
        let table = g.param(&self.store, self.output_proj);
        let logits = g.matmul_nt(y, table)?;
        let base = g.log_softmax(logits, 1, 1.0)?;
        let surface = match (&self.surface, &state.surface) {
            (Some(head), Some(cache)) => {
                let spec = self.cross_spec(b, 1, state.src_len, &state.src_lens);
                let z = cache.logits(&mut g, &self.store, head, self.output_proj, y, &spec)?;
                Some(g.log_softmax(z, 1, self.fusion.tau())?)
            }
            _ => None,
        };
        let out = self.fuse_outputs(&mut g, logits, base, surface)?;
        state.steps += 1;
        let scores = g.value(out.scores);
        if !scores.is_finite() {
            return Err(Error::NonFinite {
                op: g.first_non_finite().unwrap_or("decode").to_string(),
                step: None,
            });
        }
        Ok(scores.clone())
    }
}

/// Incremental decoding cache for a batch of sources.
#[derive(Clone, Debug)]
pub struct DecodeState {
    batch: usize,
    src_len: usize,
    src_lens: Vec<usize>,
    cross: Vec<(Tensor, Tensor)>,
    surface: Option<SurfaceCache>,
    self_k: Vec<Vec<Vec<f64>>>,
    self_v: Vec<Vec<Vec<f64>>>,
    steps: usize,
}

/// Cached surface attention inputs of a decode batch.
#[derive(Clone, Debug)]
struct SurfaceCache {
    keys: Tensor,
    values: SurfaceValues,
}

#[derive(Clone, Debug)]
enum SurfaceValues {
    /// Vocabulary-space rows per (distinct token, head); `slots` maps each
    /// padded source position to its token's rows.
    Folded { slots: Vec<usize>, rows: Tensor, bias: Vec<f64> },
    /// Projected values `[batch * src_len, D]`.
    Projected(Tensor),
}

impl SurfaceCache {
    /// Pre-temperature surface logits `r V^T` for decoder states `y`.
    fn logits(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        head: &SurfaceHead,
        pre_softmax: ParamId,
        y: Var,
        spec: &AttnSpec,
    ) -> Result<Var> {
        let attn = &head.attention;
        let q = attn.query.forward(g, store, y)?;
        let heads = attn.heads;
        let (batch, k_len) = (spec.batch, spec.k_len);
        let d = g.value(q).last_dim();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; batch * heads * k_len];
        for b in 0..batch {
            let visible = spec.key_lens[b].min(k_len);
            let q_row = g.value(q).row(b);
            for h in 0..heads {
                let p = &mut probs[(b * heads + h) * k_len..][..visible];
                for (i, pi) in p.iter_mut().enumerate() {
                    let k_row = &self.keys.row(b * k_len + i)[h * dh..(h + 1) * dh];
                    *pi = kernels::dot(&q_row[h * dh..(h + 1) * dh], k_row) * scale;
                }
                kernels::softmax_in_place(p, 1.0);
            }
        }
        match &self.values {
            SurfaceValues::Folded { slots, rows, bias } => {
                let vocab = bias.len();
                let mut out = Vec::with_capacity(batch * vocab);
                for b in 0..batch {
                    let mut z = bias.clone();
                    for i in 0..spec.key_lens[b].min(k_len) {
                        let slot = slots[b * k_len + i];
                        for h in 0..heads {
                            let a = probs[(b * heads + h) * k_len + i];
                            for (o, &u) in z.iter_mut().zip(rows.row(slot * heads + h)) {
                                *o += a * u;
                            }
                        }
                    }
                    out.extend(z);
                }
                Ok(g.constant(Tensor::new(&[batch, vocab], out)?))
            }
            SurfaceValues::Projected(values) => {
                let mut ctx = vec![0.0; batch * d];
                for b in 0..batch {
                    for h in 0..heads {
                        let out = &mut ctx[b * d + h * dh..b * d + (h + 1) * dh];
                        for i in 0..spec.key_lens[b].min(k_len) {
                            let a = probs[(b * heads + h) * k_len + i];
                            let v_row = &values.row(b * k_len + i)[h * dh..(h + 1) * dh];
                            for (o, &x) in out.iter_mut().zip(v_row) {
                                *o += a * x;
                            }
                        }
                    }
                }
                let ctx = g.constant(Tensor::new(&[batch, d], ctx)?);
                let r = attn.output.forward(g, store, ctx)?;
                let table = g.param(store, pre_softmax);
                g.matmul_nt(r, table)
            }
        }
    }
}

impl DecodeState {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Number of tokens fed so far.
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Rearranges the batch so that new entry `i` continues old entry
    /// `parents[i]`; used by beam search.
    pub fn reorder(&mut self, parents: &[usize]) -> Result<()> {
        if let Some(&bad) = parents.iter().find(|&&p| p >= self.batch) {
            return Err(Error::Index(format!("parent {bad} of {}", self.batch)));
        }
        let rows = |t: &Tensor, len: usize| -> Result<Tensor> {
            let idx: Vec<usize> = parents.iter().flat_map(|&p| p * len..(p + 1) * len).collect();
            t.select_rows(&idx)
        };
        for (k, v) in &mut self.cross {
            *k = rows(k, self.src_len)?;
            *v = rows(v, self.src_len)?;
        }
        if let Some(cache) = &mut self.surface {
            cache.keys = rows(&cache.keys, self.src_len)?;
            match &mut cache.values {
                SurfaceValues::Folded { slots, .. } => {
                    let len = self.src_len;
                    *slots = parents.iter().flat_map(|&p| slots[p * len..(p + 1) * len].to_vec()).collect();
                }
                SurfaceValues::Projected(v) => *v = rows(v, self.src_len)?,
            }
        }
        for cache in self.self_k.iter_mut().chain(self.self_v.iter_mut()) {
            *cache = parents.iter().map(|&p| cache[p].clone()).collect();
        }
        self.src_lens = parents.iter().map(|&p| self.src_lens[p]).collect();
        self.batch = parents.len();
        Ok(())
    }
}
