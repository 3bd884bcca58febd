//! Projection, shared attention encoder, context-query attention and
//! query-guided highlighting.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{row_mask, zero_masked_rows, LayerNorm, Linear};

pub const EMBED_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionalEncoding {
    #[default]
    None,
    Learned,
    Sinusoidal,
}

impl std::str::FromStr for PositionalEncoding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(PositionalEncoding::None),
            "learned" => Ok(PositionalEncoding::Learned),
            "sinusoidal" => Ok(PositionalEncoding::Sinusoidal),
            other => Err(Error::Config(format!(
                "unknown positional encoding `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub video_dim: usize,
    pub query_dim: usize,
    pub d: usize,
    pub heads: usize,
    pub blocks: usize,
    pub max_len: usize,
    pub positional: PositionalEncoding,
    pub parallel_attention: bool,
}

impl EncoderConfig {
    pub fn default_heads(d: usize) -> usize {
        if d <= 64 {
            4
        } else {
            8
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.video_dim == 0 || self.query_dim == 0 || self.max_len == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "head count {} does not divide hidden size {}",
                self.heads, self.d
            )));
        }
        Ok(())
    }
}

/// Per-batch masks in the layouts the attention ops consume.
#[derive(Debug, Clone)]
pub struct Masks {
    pub batch: usize,
    pub len: usize,
    pub query_len: usize,
    pub video: Vec<bool>,
    pub query: Vec<bool>,
}

impl Masks {
    pub fn new(
        batch: usize,
        len: usize,
        query_len: usize,
        video: Vec<bool>,
        query: Vec<bool>,
    ) -> Result<Self> {
        if video.len() != batch * len || query.len() != batch * query_len {
            return Err(Error::shape(
                "masks",
                &[batch, len, query_len],
                &[video.len(), query.len()],
            ));
        }
        Ok(Masks {
            batch,
            len,
            query_len,
            video,
            query,
        })
    }

    /// `[B, rows, keys.len()/B]` mask where row entries copy the key mask.
    pub fn score_mask(&self, rows: usize, keys: &[bool]) -> Vec<bool> {
        let k = keys.len() / self.batch;
        let mut out = Vec::with_capacity(self.batch * rows * k);
        for b in 0..self.batch {
            for _ in 0..rows {
                out.extend_from_slice(&keys[b * k..(b + 1) * k]);
            }
        }
        out
    }
}

/// Linear projection plus layer norm per modality into the shared width.
#[derive(Debug, Clone)]
pub struct Projection {
    pub video: Linear,
    pub video_norm: LayerNorm,
    pub query: Linear,
    pub query_norm: LayerNorm,
    pub normalize: bool,
}

impl Projection {
    pub fn new<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        cfg: &EncoderConfig,
        rng: &mut R,
    ) -> Self {
        Projection {
            video: Linear::new(store, "proj.video", cfg.video_dim, cfg.d, rng),
            video_norm: LayerNorm::new(store, "proj.video_norm", cfg.d),
            query: Linear::new(store, "proj.query", cfg.query_dim, cfg.d, rng),
            query_norm: LayerNorm::new(store, "proj.query_norm", cfg.d),
            normalize: true,
        }
    }

    pub fn forward<F: Real, R: Rng>(
        &self,
        g: &mut Graph<'_, F>,
        video: Var,
        query: Var,
        masks: &Masks,
        dropout: f64,
        rng: &mut R,
    ) -> Result<(Var, Var)> {
        let v = self.one(
            g,
            video,
            self.video,
            self.video_norm,
            &masks.video,
            dropout,
            rng,
        )?;
        let q = self.one(
            g,
            query,
            self.query,
            self.query_norm,
            &masks.query,
            dropout,
            rng,
        )?;
        Ok((v, q))
    }

    #[allow(clippy::too_many_arguments)]
    fn one<F: Real, R: Rng>(
        &self,
        g: &mut Graph<'_, F>,
        x: Var,
        lin: Linear,
        norm: LayerNorm,
        mask: &[bool],
        dropout: f64,
        rng: &mut R,
    ) -> Result<Var> {
        let cols = *g.shape(x).last().unwrap_or(&0);
        if cols != lin.fan_in {
            return Err(Error::shape("project", g.shape(x), &[lin.fan_in]));
        }
        let mut y = lin.forward(g, x)?;
        if self.normalize {
            y = norm.forward(g, y)?;
        }
        let y = g.dropout(y, dropout, rng)?;
        zero_masked_rows(g, y, mask)
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            // A key bias shifts every score in a row equally, so it is omitted.
            k: Linear::without_bias(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, rng),
            heads,
        }
    }

    /// `queries: [B, Tq, d]` attend over `keys: [B, Tk, d]`; `score_mask` is
    /// `[B, Tq, Tk]`. Returns the output and each head's weights.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        queries: Var,
        keys: Var,
        score_mask: &[bool],
    ) -> Result<(Var, Vec<Var>)> {
        let d = self.q.fan_out;
        let dh = d / self.heads;
        let q = self.q.forward(g, queries)?;
        let k = self.k.forward(g, keys)?;
        let v = self.v.forward(g, keys)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice(q, h * dh, dh)?,
                    g.slice(k, h * dh, dh)?,
                    g.slice(v, h * dh, dh)?,
                )
            };
            let s = g.bmm(qh, kh, true)?;
            let s = g.scale(s, scale);
            let a = g.masked_softmax(s, score_mask)?;
            outs.push(g.bmm(a, vh, false)?);
            weights.push(a);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat(&outs)?
        };
        Ok((self.o.forward(g, cat)?, weights))
    }
}

/// Cross-modal path run alongside self-attention and merged through a
/// sigmoid gate.
#[derive(Debug, Clone)]
pub struct ParallelCross {
    pub attn: MultiHeadAttention,
    pub gate: Linear,
}

#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub norm_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub cross: Option<ParallelCross>,
    pub norm_ffn: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

impl EncoderBlock {
    pub fn new<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        cfg: &EncoderConfig,
        rng: &mut R,
    ) -> Self {
        let d = cfg.d;
        let cross = cfg.parallel_attention.then(|| ParallelCross {
            attn: MultiHeadAttention::new(store, &format!("{name}.cross"), d, cfg.heads, rng),
            gate: Linear::new(store, &format!("{name}.gate"), 2 * d, d, rng),
        });
        EncoderBlock {
            norm_attn: LayerNorm::new(store, &format!("{name}.norm_attn"), d),
            attn: MultiHeadAttention::new(store, &format!("{name}.self"), d, cfg.heads, rng),
            cross,
            norm_ffn: LayerNorm::new(store, &format!("{name}.norm_ffn"), d),
            ffn_in: Linear::new(store, &format!("{name}.ffn_in"), d, 2 * d, rng),
            ffn_out: Linear::new(store, &format!("{name}.ffn_out"), 2 * d, d, rng),
        }
    }

    /// One pass over both modalities with the same weights.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        v: Var,
        q: Var,
        masks: &Masks,
    ) -> Result<(Var, Var)> {
        let (t, n) = (masks.len, masks.query_len);
        let nv = self.norm_attn.forward(g, v)?;
        let nq = self.norm_attn.forward(g, q)?;
        let (mut av, _) = self
            .attn
            .forward(g, nv, nv, &masks.score_mask(t, &masks.video))?;
        let (mut aq, _) = self
            .attn
            .forward(g, nq, nq, &masks.score_mask(n, &masks.query))?;
        if let Some(cross) = &self.cross {
            let (cv, _) = cross
                .attn
                .forward(g, nv, nq, &masks.score_mask(t, &masks.query))?;
            let (cq, _) = cross
                .attn
                .forward(g, nq, nv, &masks.score_mask(n, &masks.video))?;
            av = gated_merge(g, &cross.gate, av, cv)?;
            aq = gated_merge(g, &cross.gate, aq, cq)?;
        }
        let v = g.add(v, av)?;
        let q = g.add(q, aq)?;
        let v = self.ffn(g, v, &masks.video)?;
        let q = self.ffn(g, q, &masks.query)?;
        Ok((v, q))
    }

    fn ffn<F: Real>(&self, g: &mut Graph<'_, F>, x: Var, mask: &[bool]) -> Result<Var> {
        let h = self.norm_ffn.forward(g, x)?;
        let h = self.ffn_in.forward(g, h)?;
        let h = g.relu(h);
        let h = self.ffn_out.forward(g, h)?;
        let y = g.add(x, h)?;
        zero_masked_rows(g, y, mask)
    }
}

/// `cross + σ(W[self; cross]) ⊙ (self − cross)`.
fn gated_merge<F: Real>(g: &mut Graph<'_, F>, gate: &Linear, own: Var, cross: Var) -> Result<Var> {
    let cat = g.concat(&[own, cross])?;
    let z = gate.forward(g, cat)?;
    let z = g.sigmoid(z);
    let diff = g.sub(own, cross)?;
    let gated = g.mul(z, diff)?;
    g.add(cross, gated)
}

/// Sinusoidal table `[len, d]`.
pub fn sinusoidal_table(len: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * d];
    for t in 0..len {
        for i in 0..d {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = t as f64 * freq;
            out[t * d + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    out
}

/// Trilinear context-query attention.
#[derive(Debug, Clone)]
pub struct ContextQueryAttention {
    pub w_context: ParamId,
    pub w_query: ParamId,
    pub w_product: ParamId,
    pub out: Linear,
}

/// Intermediate values exposed for inspection.
#[derive(Debug, Clone, Copy)]
pub struct CqaOutput {
    pub fused: Var,
    pub scores: Var,
    pub context_to_query: Var,
    pub query_to_context: Var,
}

impl ContextQueryAttention {
    pub fn new<F: Real, R: Rng>(store: &mut ParamStore<F>, d: usize, rng: &mut R) -> Self {
        ContextQueryAttention {
            w_context: store.add_fan_uniform("cqa.w_context", &[d, 1], d, rng),
            w_query: store.add_fan_uniform("cqa.w_query", &[d, 1], d, rng),
            w_product: store.add_fan_uniform("cqa.w_product", &[d], d, rng),
            out: Linear::new(store, "cqa.out", 4 * d, d, rng),
        }
    }

    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        c: Var,
        q: Var,
        masks: &Masks,
    ) -> Result<CqaOutput> {
        let (b, t, n) = (masks.batch, masks.len, masks.query_len);
        let wc = g.param(self.w_context);
        let wq = g.param(self.w_query);
        let wp = g.param(self.w_product);
        let cw = g.mul_row(c, wp)?;
        let c1 = g.matmul(c, wc)?;
        let q2 = g.matmul(q, wq)?;
        let ones_t = g.constant(Tensor::full(&[b, t, 1], F::one()));
        let ones_n = g.constant(Tensor::full(&[b, n, 1], F::one()));
        let left = g.concat(&[cw, c1, ones_t])?;
        let right = g.concat(&[q, ones_n, q2])?;
        let s = g.bmm(left, right, true)?;
        let s_rows = g.masked_softmax(s, &masks.score_mask(t, &masks.query))?;
        let st = g.transpose(s)?;
        let s_cols = g.masked_softmax(st, &masks.score_mask(n, &masks.video))?;
        let a = g.bmm(s_rows, q, false)?;
        let col_c = g.bmm(s_cols, c, false)?;
        let bb = g.bmm(s_rows, col_c, false)?;
        let ca = g.mul(c, a)?;
        let cb = g.mul(c, bb)?;
        let cat = g.concat(&[c, a, ca, cb])?;
        let fused = self.out.forward(g, cat)?;
        let fused = zero_masked_rows(g, fused, &masks.video)?;
        Ok(CqaOutput {
            fused,
            scores: s,
            context_to_query: a,
            query_to_context: bb,
        })
    }
}

/// Foreground scoring conditioned on the pooled query.
#[derive(Debug, Clone)]
pub struct QueryGuidedHighlight {
    pub score: Linear,
    pub out: Linear,
}

#[derive(Debug, Clone, Copy)]
pub struct HighlightOutput {
    /// `[B, T, d]`, zero at padding.
    pub features: Var,
    /// `[B, T]` pre-sigmoid scores.
    pub logits: Var,
    /// `[B, T]` in `[0, 1]`, zero at padding.
    pub scores: Var,
}

impl QueryGuidedHighlight {
    pub fn new<F: Real, R: Rng>(store: &mut ParamStore<F>, d: usize, rng: &mut R) -> Self {
        QueryGuidedHighlight {
            score: Linear::new(store, "qgh.score", 2 * d, 1, rng),
            out: Linear::new(store, "qgh.out", 2 * d, d, rng),
        }
    }

    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        fused: Var,
        q: Var,
        masks: &Masks,
    ) -> Result<HighlightOutput> {
        let (b, t, n) = (masks.batch, masks.len, masks.query_len);
        let d = g.value(q).cols();
        let mut pool = vec![F::zero(); b * n];
        for bi in 0..b {
            let m = &masks.query[bi * n..(bi + 1) * n];
            let valid = m.iter().filter(|&&x| x).count().max(1);
            for (j, &mj) in m.iter().enumerate() {
                if mj {
                    pool[bi * n + j] = F::one() / F::of(valid as f64);
                }
            }
        }
        let pool = g.constant(Tensor::new(&[b, 1, n], pool)?);
        let qbar = g.bmm(pool, q, false)?;
        let qbar = g.reshape(qbar, &[b, d])?;
        let idx: Vec<usize> = (0..b).flat_map(|bi| std::iter::repeat_n(bi, t)).collect();
        let qbar = g.gather_rows(qbar, &idx)?;
        let qbar = g.reshape(qbar, &[b, t, d])?;
        let x = g.concat(&[fused, qbar])?;
        let logits = self.score.forward(g, x)?;
        let logits = g.reshape(logits, &[b, t])?;
        let h = g.sigmoid(logits);
        let h = g.mul_const(h, row_mask(&masks.video, 1))?;
        let scaled = g.scale_rows(x, h)?;
        let y = self.out.forward(g, scaled)?;
        let features = zero_masked_rows(g, y, &masks.video)?;
        Ok(HighlightOutput {
            features,
            logits,
            scores: h,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub projection: Projection,
    pub positions: Option<ParamId>,
    pub blocks: Vec<EncoderBlock>,
    pub cqa: ContextQueryAttention,
    pub qgh: QueryGuidedHighlight,
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput {
    pub video: Var,
    pub query: Var,
    pub highlight: HighlightOutput,
}

impl Encoder {
    pub fn new<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        cfg: &EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let projection = Projection::new(store, cfg, rng);
        let positions = match cfg.positional {
            PositionalEncoding::None => None,
            PositionalEncoding::Learned => {
                Some(store.add_normal("pos.learned", &[cfg.max_len, cfg.d], EMBED_STD, rng))
            }
            PositionalEncoding::Sinusoidal => None,
        };
        let blocks = (0..cfg.blocks)
            .map(|i| EncoderBlock::new(store, &format!("enc{i}"), cfg, rng))
            .collect();
        Ok(Encoder {
            cfg: cfg.clone(),
            projection,
            positions,
            blocks,
            cqa: ContextQueryAttention::new(store, cfg.d, rng),
            qgh: QueryGuidedHighlight::new(store, cfg.d, rng),
        })
    }

    /// Projection followed by the encoder blocks.
    pub fn encode<F: Real, R: Rng>(
        &self,
        g: &mut Graph<'_, F>,
        video: Var,
        query: Var,
        masks: &Masks,
        dropout: f64,
        rng: &mut R,
    ) -> Result<(Var, Var)> {
        let (mut v, mut q) = self
            .projection
            .forward(g, video, query, masks, dropout, rng)?;
        for block in &self.blocks {
            v = self.add_positions(g, v, masks)?;
            let (nv, nq) = block.forward(g, v, q, masks)?;
            v = nv;
            q = nq;
        }
        Ok((v, q))
    }

    fn add_positions<F: Real>(&self, g: &mut Graph<'_, F>, v: Var, masks: &Masks) -> Result<Var> {
        let (b, t, d) = (masks.batch, masks.len, self.cfg.d);
        if self.cfg.positional != PositionalEncoding::None && t > self.cfg.max_len {
            return Err(Error::invalid(
                "positional encoding",
                format!("length {t} exceeds {}", self.cfg.max_len),
            ));
        }
        let pe = match (self.cfg.positional, self.positions) {
            (PositionalEncoding::Learned, Some(id)) => {
                let table = g.param(id);
                let idx: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
                let rows = g.gather_rows(table, &idx)?;
                g.reshape(rows, &[b, t, d])?
            }
            (PositionalEncoding::Sinusoidal, _) => {
                let table = sinusoidal_table(t, d);
                let data: Vec<F> = (0..b)
                    .flat_map(|_| table.iter().map(|&x| F::of(x)))
                    .collect();
                g.constant(Tensor::new(&[b, t, d], data)?)
            }
            _ => return Ok(v),
        };
        let pe = zero_masked_rows(g, pe, &masks.video)?;
        g.add(v, pe)
    }

    pub fn forward<F: Real, R: Rng>(
        &self,
        g: &mut Graph<'_, F>,
        video: Var,
        query: Var,
        masks: &Masks,
        dropout: f64,
        rng: &mut R,
    ) -> Result<EncoderOutput> {
        let (v, q) = self.encode(g, video, query, masks, dropout, rng)?;
        let cqa = self.cqa.forward(g, v, q, masks)?;
        let highlight = self.qgh.forward(g, cqa.fused, q, masks)?;
        Ok(EncoderOutput {
            video: v,
            query: q,
            highlight,
        })
    }
}
