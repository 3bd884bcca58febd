//! Training objective: span, highlight, recovery and alignment terms.

use serde::{Deserialize, Serialize};

use crate::autodiff::prob::{binary_cross_entropy, cross_entropy, kl_divergence};
use crate::autodiff::{Graph, Real, Var};
use crate::data::SpanLabels;
use crate::error::{Error, Result};
use crate::span_predictor::{BranchLogits, BranchOutput};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_qgh: f64,
    pub lambda_rec: f64,
    pub lambda_align: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_qgh: 5.0,
            lambda_rec: 1.0,
            lambda_align: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_qgh", self.lambda_qgh),
            ("lambda_rec", self.lambda_rec),
            ("lambda_align", self.lambda_align),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be a finite non-negative number, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Loss values for one step. `rec` and `align` are absent when the
/// recovering branch or the alignment term is disabled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub span: f64,
    pub qgh: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rec: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub align: Option<f64>,
    pub total: f64,
}

pub fn total_loss(
    span: f64,
    qgh: f64,
    rec: Option<f64>,
    align: Option<f64>,
    w: &LossWeights,
) -> Result<LossReport> {
    w.validate()?;
    for v in [Some(span), Some(qgh), rec, align].into_iter().flatten() {
        if !v.is_finite() {
            return Err(Error::invalid(
                "total_loss",
                format!("non-finite component {v}"),
            ));
        }
    }
    let total = span
        + w.lambda_qgh * qgh
        + w.lambda_rec * rec.unwrap_or(0.0)
        + w.lambda_align * align.unwrap_or(0.0);
    Ok(LossReport {
        span,
        qgh,
        rec,
        align,
        total,
    })
}

fn check_boundary(labels: &SpanLabels, valid: &[bool]) -> Result<()> {
    for i in [labels.start, labels.end] {
        if !valid.get(i).copied().unwrap_or(false) {
            return Err(Error::invalid(
                "span_loss",
                format!("boundary index {i} is masked"),
            ));
        }
    }
    Ok(())
}

/// `CE(P_s, i_s) + CE(P_e, i_e)`.
pub fn span_loss(out: &BranchOutput, labels: &SpanLabels) -> Result<f64> {
    check_boundary(labels, &out.valid)?;
    Ok(cross_entropy(&out.start, labels.start)? + cross_entropy(&out.end, labels.end)?)
}

/// Same contract as [`span_loss`], applied to the recovered distributions.
pub fn recovery_loss(rec: &BranchOutput, labels: &SpanLabels) -> Result<f64> {
    span_loss(rec, labels)
}

/// Mean binary cross-entropy of highlight scores over valid positions.
pub fn qgh_loss(scores: &[f64], foreground: &[f64], valid: &[bool]) -> Result<f64> {
    binary_cross_entropy(scores, foreground, valid)
}

/// `KL(P_s ‖ P_s^rec) + KL(P_e ‖ P_e^rec)`.
pub fn alignment_loss(pred: &BranchOutput, rec: &BranchOutput) -> Result<f64> {
    if pred.valid != rec.valid {
        return Err(Error::invalid(
            "alignment_loss",
            "support mismatch between branches",
        ));
    }
    Ok(kl_divergence(&pred.start, &rec.start)? + kl_divergence(&pred.end, &rec.end)?)
}

/// Batch-level targets for the graph objective.
#[derive(Debug, Clone)]
pub struct Targets<F> {
    pub mask: Vec<bool>,
    pub start: Vec<usize>,
    pub end: Vec<usize>,
    pub highlight: Vec<F>,
}

/// Graph nodes of each term; every term is a batch mean.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveVars {
    pub span: Var,
    pub qgh: Var,
    pub rec: Option<Var>,
    pub align: Option<Var>,
    pub total: Var,
}

impl ObjectiveVars {
    pub fn report<F: Real>(&self, g: &Graph<'_, F>) -> LossReport {
        let v = |x: Var| g.scalar(x).as_f64();
        LossReport {
            span: v(self.span),
            qgh: v(self.qgh),
            rec: self.rec.map(v),
            align: self.align.map(v),
            total: v(self.total),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObjectiveOptions {
    pub align: bool,
    /// Stop gradients through the recovering branch in the alignment term.
    pub detach_teacher: bool,
}

impl Default for ObjectiveOptions {
    fn default() -> Self {
        ObjectiveOptions {
            align: true,
            detach_teacher: true,
        }
    }
}

fn span_nodes<F: Real>(g: &mut Graph<'_, F>, b: &BranchLogits, t: &Targets<F>) -> Result<Var> {
    let s = g.cross_entropy(b.start, &t.mask, &t.start)?;
    let e = g.cross_entropy(b.end, &t.mask, &t.end)?;
    g.add(s, e)
}

/// Records the weighted objective. The recovering terms are built only
/// when `rec` is given; alignment additionally requires `opts.align`.
pub fn objective<F: Real>(
    g: &mut Graph<'_, F>,
    pred: &BranchLogits,
    rec: Option<&BranchLogits>,
    highlight_logits: Var,
    targets: &Targets<F>,
    weights: &LossWeights,
    opts: ObjectiveOptions,
) -> Result<ObjectiveVars> {
    objective_with_teacher(g, pred, rec, None, highlight_logits, targets, weights, opts)
}

/// As [`objective`], but the alignment target is `teacher` when given
/// instead of the recovering branch's own logits.
#[allow(clippy::too_many_arguments)]
pub fn objective_with_teacher<F: Real>(
    g: &mut Graph<'_, F>,
    pred: &BranchLogits,
    rec: Option<&BranchLogits>,
    teacher: Option<&BranchLogits>,
    highlight_logits: Var,
    targets: &Targets<F>,
    weights: &LossWeights,
    opts: ObjectiveOptions,
) -> Result<ObjectiveVars> {
    weights.validate()?;
    let span = span_nodes(g, pred, targets)?;
    let qgh = g.bce_with_logits(highlight_logits, &targets.highlight, &targets.mask)?;
    let weighted_qgh = g.scale(qgh, weights.lambda_qgh);
    let mut total = g.add(span, weighted_qgh)?;
    let mut rec_var = None;
    let mut align_var = None;
    if let Some(r) = rec {
        let rl = span_nodes(g, r, targets)?;
        let w = g.scale(rl, weights.lambda_rec);
        total = g.add(total, w)?;
        rec_var = Some(rl);
        if opts.align {
            let r = teacher.unwrap_or(r);
            let (qs, qe) = if opts.detach_teacher {
                (g.detach(r.start), g.detach(r.end))
            } else {
                (r.start, r.end)
            };
            let ks = g.kl_divergence(pred.start, qs, &targets.mask)?;
            let ke = g.kl_divergence(pred.end, qe, &targets.mask)?;
            let a = g.add(ks, ke)?;
            let w = g.scale(a, weights.lambda_align);
            total = g.add(total, w)?;
            align_var = Some(a);
        }
    }
    Ok(ObjectiveVars {
        span,
        qgh,
        rec: rec_var,
        align: align_var,
        total,
    })
}
