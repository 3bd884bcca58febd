//! Two-branch span predictor sharing one set of GRU and head weights, label
//! corruption, and span selection.

use rand::Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::encoder::EMBED_STD;
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};

/// Rows of the label embedding table.
pub const START: usize = 0;
pub const NONSTART: usize = 1;
pub const END: usize = 2;
pub const NONEND: usize = 3;
pub const NULL: usize = 4;
pub const LABEL_ROWS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    Start,
    End,
}

impl Boundary {
    /// Table row for a label bit.
    pub fn token(self, bit: bool) -> usize {
        match (self, bit) {
            (Boundary::Start, true) => START,
            (Boundary::Start, false) => NONSTART,
            (Boundary::End, true) => END,
            (Boundary::End, false) => NONEND,
        }
    }
}

/// `[5, d]` table of start, non-start, end, non-end and null embeddings.
#[derive(Debug, Clone, Copy)]
pub struct LabelEmbeddingTable {
    pub table: ParamId,
}

impl LabelEmbeddingTable {
    pub fn new<F: Real, R: Rng>(store: &mut ParamStore<F>, d: usize, rng: &mut R) -> Self {
        LabelEmbeddingTable {
            table: store.add_normal("labels.table", &[LABEL_ROWS, d], EMBED_STD, rng),
        }
    }
}

pub fn label_tokens(bits: &[bool], kind: Boundary) -> Vec<usize> {
    bits.iter().map(|&b| kind.token(b)).collect()
}

/// Per-position embedding rows `[bits.len(), d]`.
pub fn embed_labels<F: Real>(
    g: &mut Graph<'_, F>,
    bits: &[bool],
    kind: Boundary,
    table: &LabelEmbeddingTable,
) -> Result<Var> {
    let t = g.param(table.table);
    g.gather_rows(t, &label_tokens(bits, kind))
}

/// Inverts each valid position independently with probability `alpha`.
/// Returns the corrupted sequence and the number of flips.
pub fn flip_labels<R: Rng>(
    labels: &[bool],
    alpha: f64,
    valid: &[bool],
    rng: &mut R,
) -> Result<(Vec<bool>, usize)> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(
            "flip_labels",
            format!("alpha {alpha} outside [0, 1]"),
        ));
    }
    if labels.len() != valid.len() {
        return Err(Error::shape("flip_labels", &[labels.len()], &[valid.len()]));
    }
    let mut flips = 0;
    let out = labels
        .iter()
        .zip(valid)
        .map(|(&b, &v)| {
            if v && rng.random::<f64>() < alpha {
                flips += 1;
                !b
            } else {
                b
            }
        })
        .collect();
    Ok((out, flips))
}

/// Single-layer unidirectional GRU with hidden size `d`.
#[derive(Debug, Clone, Copy)]
pub struct Gru {
    /// `[in, 3d]`, gate order r, z, n.
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub b_input: ParamId,
    pub b_hidden: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl Gru {
    pub fn new<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Gru {
            w_input: store.add_normal(
                format!("{name}.w_input"),
                &[input, 3 * hidden],
                EMBED_STD,
                rng,
            ),
            w_hidden: store.add_normal(
                format!("{name}.w_hidden"),
                &[hidden, 3 * hidden],
                EMBED_STD,
                rng,
            ),
            b_input: store.add_const(format!("{name}.b_input"), &[3 * hidden], 0.0),
            b_hidden: store.add_const(format!("{name}.b_hidden"), &[3 * hidden], 0.0),
            input,
            hidden,
        }
    }

    /// Rows `start..start+len` of the input weight, as `[len, 3d]`.
    pub fn input_block<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        start: usize,
        len: usize,
    ) -> Result<Var> {
        let w = g.param(self.w_input);
        let rows: Vec<usize> = (start..start + len).collect();
        g.gather_rows(w, &rows)
    }

    /// One step from projected input `gi: [B, 3d]` (input bias included).
    pub fn cell<F: Real>(&self, g: &mut Graph<'_, F>, gi: Var, h: Var) -> Result<Var> {
        let d = self.hidden;
        let wh = g.param(self.w_hidden);
        let bh = g.param(self.b_hidden);
        let gh = g.matmul(h, wh)?;
        let gh = g.add_row(gh, bh)?;
        let gi_rz = g.slice(gi, 0, 2 * d)?;
        let gh_rz = g.slice(gh, 0, 2 * d)?;
        let rz = g.add(gi_rz, gh_rz)?;
        let rz = g.sigmoid(rz);
        let r = g.slice(rz, 0, d)?;
        let z = g.slice(rz, d, d)?;
        let gi_n = g.slice(gi, 2 * d, d)?;
        let gh_n = g.slice(gh, 2 * d, d)?;
        let rn = g.mul(r, gh_n)?;
        let n = g.add(gi_n, rn)?;
        let n = g.tanh(n);
        let diff = g.sub(h, n)?;
        let zd = g.mul(z, diff)?;
        g.add(n, zd)
    }

    /// Runs over `gi: [B, T, 3d]` from a zero state, returning `[B, T, d]`.
    /// Recorded as one fused node; [`cell`](Self::cell) is the per-step form.
    pub fn run<F: Real>(&self, g: &mut Graph<'_, F>, gi: Var) -> Result<Var> {
        let shape = g.shape(gi).to_vec();
        if shape.len() != 3 || shape[2] != 3 * self.hidden {
            return Err(Error::shape("gru", &shape, &[3 * self.hidden]));
        }
        let wh = g.param(self.w_hidden);
        let bh = g.param(self.b_hidden);
        g.gru(gi, wh, bh)
    }

    /// [`run`](Self::run) unrolled into [`cell`](Self::cell) steps.
    pub fn run_unrolled<F: Real>(&self, g: &mut Graph<'_, F>, gi: Var) -> Result<Var> {
        let shape = g.shape(gi).to_vec();
        if shape.len() != 3 || shape[2] != 3 * self.hidden {
            return Err(Error::shape("gru", &shape, &[3 * self.hidden]));
        }
        let (b, t) = (shape[0], shape[1]);
        let flat = g.reshape(gi, &[b * t, 3 * self.hidden])?;
        let mut h = g.constant(Tensor::zeros(&[b, self.hidden]));
        let mut states = Vec::with_capacity(t);
        for step in 0..t {
            let idx: Vec<usize> = (0..b).map(|bi| bi * t + step).collect();
            let gi_t = g.gather_rows(flat, &idx)?;
            h = self.cell(g, gi_t, h)?;
            states.push(h);
        }
        g.stack_steps(&states)
    }
}

/// Linear, layer norm, ReLU, linear to one score per step.
#[derive(Debug, Clone, Copy)]
pub struct PredHead {
    pub hidden: Linear,
    pub norm: LayerNorm,
    pub out: Linear,
}

impl PredHead {
    pub fn new<F: Real, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        d: usize,
        rng: &mut R,
    ) -> Self {
        PredHead {
            hidden: Linear::new(store, &format!("{name}.hidden"), d, d, rng),
            norm: LayerNorm::new(store, &format!("{name}.norm"), d),
            // Scores feed a softmax over time, so a scalar bias would be inert.
            out: Linear::without_bias(store, &format!("{name}.out"), d, 1, rng),
        }
    }

    /// `[B, T, d] → [B, T]` logits.
    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let h = self.hidden.forward(g, x)?;
        let h = self.norm.forward(g, h)?;
        let h = g.relu(h);
        let s = self.out.forward(g, h)?;
        g.reshape(s, &shape[..shape.len() - 1])
    }
}

/// Per-branch boundary logits, each `[B, T]`.
#[derive(Debug, Clone, Copy)]
pub struct BranchLogits {
    pub start: Var,
    pub end: Var,
}

/// Feature-side projections computed once per graph and shared by both
/// branches.
#[derive(Debug, Clone, Copy)]
pub struct SharedInputs {
    batch: usize,
    len: usize,
    features_start: Var,
    labels_start: Var,
    labels_end: Var,
    end_state_block: Var,
}

#[derive(Debug, Clone)]
pub struct SpanPredictor {
    pub labels: LabelEmbeddingTable,
    pub start_gru: Gru,
    pub end_gru: Gru,
    pub start_head: PredHead,
    pub end_head: PredHead,
    pub d: usize,
}

impl SpanPredictor {
    pub fn new<F: Real, R: Rng>(store: &mut ParamStore<F>, d: usize, rng: &mut R) -> Self {
        SpanPredictor {
            labels: LabelEmbeddingTable::new(store, d, rng),
            start_gru: Gru::new(store, "span.start_gru", 2 * d, d, rng),
            end_gru: Gru::new(store, "span.end_gru", 2 * d, d, rng),
            start_head: PredHead::new(store, "span.start_head", d, rng),
            end_head: PredHead::new(store, "span.end_head", d, rng),
            d,
        }
    }

    /// Splits each GRU's `[2d, 3d]` input weight into the part applied to
    /// the per-step state and the part applied to the label embedding, and
    /// projects the feature side once.
    pub fn shared<F: Real>(&self, g: &mut Graph<'_, F>, features: Var) -> Result<SharedInputs> {
        let shape = g.shape(features).to_vec();
        if shape.len() != 3 || shape[2] != self.d {
            return Err(Error::shape("span predictor", &shape, &[self.d]));
        }
        let d = self.d;
        let table = g.param(self.labels.table);
        let ws_feat = self.start_gru.input_block(g, 0, d)?;
        let ws_label = self.start_gru.input_block(g, d, d)?;
        let we_state = self.end_gru.input_block(g, 0, d)?;
        let we_label = self.end_gru.input_block(g, d, d)?;
        let fs = g.matmul(features, ws_feat)?;
        let bs = g.param(self.start_gru.b_input);
        let features_start = g.add_row(fs, bs)?;
        let labels_start = g.matmul(table, ws_label)?;
        let labels_end = g.matmul(table, we_label)?;
        Ok(SharedInputs {
            batch: shape[0],
            len: shape[1],
            features_start,
            labels_start,
            labels_end,
            end_state_block: we_state,
        })
    }

    /// Runs one branch. `start_tokens`/`end_tokens` index table rows, one per
    /// `(b, t)`; the predicting branch passes `NULL` everywhere.
    pub fn branch<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        s: &SharedInputs,
        start_tokens: &[usize],
        end_tokens: &[usize],
    ) -> Result<BranchLogits> {
        let (b, t, d3) = (s.batch, s.len, 3 * self.d);
        if start_tokens.len() != b * t || end_tokens.len() != b * t {
            return Err(Error::shape(
                "span branch",
                &[b, t],
                &[start_tokens.len(), end_tokens.len()],
            ));
        }
        let ls = g.gather_rows(s.labels_start, start_tokens)?;
        let ls = g.reshape(ls, &[b, t, d3])?;
        let gi = g.add(s.features_start, ls)?;
        let hs = self.start_gru.run(g, gi)?;
        let start = self.start_head.forward(g, hs)?;

        let ge = g.matmul(hs, s.end_state_block)?;
        let be = g.param(self.end_gru.b_input);
        let ge = g.add_row(ge, be)?;
        let le = g.gather_rows(s.labels_end, end_tokens)?;
        let le = g.reshape(le, &[b, t, d3])?;
        let ge = g.add(ge, le)?;
        let he = self.end_gru.run(g, ge)?;
        let end = self.end_head.forward(g, he)?;
        Ok(BranchLogits { start, end })
    }

    pub fn predict<F: Real>(&self, g: &mut Graph<'_, F>, s: &SharedInputs) -> Result<BranchLogits> {
        let null = vec![NULL; s.batch * s.len];
        self.branch(g, s, &null, &null)
    }

    /// The recovering branch on corrupted start/end bit sequences.
    pub fn recover<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        s: &SharedInputs,
        start_bits: &[bool],
        end_bits: &[bool],
    ) -> Result<BranchLogits> {
        self.branch(
            g,
            s,
            &label_tokens(start_bits, Boundary::Start),
            &label_tokens(end_bits, Boundary::End),
        )
    }
}

/// Boundary distributions for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchOutput {
    pub start: Vec<f64>,
    pub end: Vec<f64>,
    pub valid: Vec<bool>,
}

impl BranchOutput {
    /// Splits batched logits into masked-softmax distributions per sample.
    pub fn from_logits<F: Real>(
        g: &Graph<'_, F>,
        logits: &BranchLogits,
        mask: &[bool],
    ) -> Result<Vec<BranchOutput>> {
        let (s, e) = (g.value(logits.start), g.value(logits.end));
        let t = s.cols();
        let mut out = Vec::with_capacity(s.rows());
        for ((sr, er), m) in s
            .data()
            .chunks(t)
            .zip(e.data().chunks(t))
            .zip(mask.chunks(t))
        {
            let sr: Vec<f64> = sr.iter().map(|v| v.as_f64()).collect();
            let er: Vec<f64> = er.iter().map(|v| v.as_f64()).collect();
            out.push(BranchOutput {
                start: crate::autodiff::prob::masked_softmax(&sr, m)?,
                end: crate::autodiff::prob::masked_softmax(&er, m)?,
                valid: m.to_vec(),
            });
        }
        Ok(out)
    }
}

/// The valid pair `(i, j)`, `i ≤ j`, maximizing `start[i]·end[j]`; ties go to
/// the smallest `i`, then the smallest `j`.
pub fn select_span(out: &BranchOutput) -> Result<(usize, usize)> {
    let t = out.valid.len();
    if out.start.len() != t || out.end.len() != t {
        return Err(Error::shape(
            "select_span",
            &[out.start.len(), out.end.len()],
            &[t],
        ));
    }
    let mut best: Option<(f64, usize, usize)> = None;
    for i in (0..t).filter(|&i| out.valid[i]) {
        for j in (i..t).filter(|&j| out.valid[j]) {
            let p = out.start[i] * out.end[j];
            if best.is_none_or(|(b, _, _)| p > b) {
                best = Some((p, i, j));
            }
        }
    }
    best.map(|(_, i, j)| (i, j))
        .ok_or(Error::DegenerateDistribution)
}

#[cfg(test)]
mod tests;
