//! Adaptive-thresholding rank loss and the sigmoid/BCE alternative.
//!
//! Score matrices are `[rows, C + 1]` with the AT class last. Each row is
//! one token position; its labels list the positive classes and optionally
//! which of the `C` classes are active at all.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::{Float, Function, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RowLabels {
    pub positives: Vec<usize>,
    /// `None` means every class is active.
    pub active: Option<Arc<[bool]>>,
    /// Padding rows contribute nothing.
    pub ignored: bool,
}

impl RowLabels {
    fn is_active(&self, class: usize) -> bool {
        self.active.as_ref().map_or(true, |m| m[class])
    }
}

/// Per-position positive sets for one score matrix. The negative set of a
/// row is every active non-AT class that is not positive.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionLabels {
    classes: usize,
    rows: Vec<RowLabels>,
}

impl PositionLabels {
    pub fn new(classes: usize) -> Self {
        Self { classes, rows: Vec::new() }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn rows(&self) -> &[RowLabels] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn push(&mut self, mut positives: Vec<usize>, active: Option<Arc<[bool]>>) -> Result<()> {
        positives.sort_unstable();
        positives.dedup();
        if let Some(m) = &active {
            if m.len() != self.classes {
                return Err(Error::InvalidArgument(format!("mask of {} columns for {} classes", m.len(), self.classes)));
            }
        }
        let row = RowLabels {
            positives,
            active,
            ignored: false,
        };
        if let Some(&p) = row.positives.iter().find(|&&p| p >= self.classes || !row.is_active(p)) {
            return Err(Error::InvalidArgument(format!("positive class {p} is out of range or masked")));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn push_ignored(&mut self) {
        self.rows.push(RowLabels {
            ignored: true,
            ..Default::default()
        });
    }

    pub fn extend(&mut self, other: PositionLabels) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::InvalidArgument(format!("{} vs {} classes", other.classes, self.classes)));
        }
        self.rows.extend(other.rows);
        Ok(())
    }

    fn check<T: Float>(&self, scores: &Tensor<T>, op: &'static str) -> Result<()> {
        let (rows, cols) = scores.expect_matrix(op)?;
        if rows != self.rows.len() || cols != self.classes + 1 {
            return Err(Error::shape(
                op,
                format!("scores [{rows}, {cols}] vs {} labelled rows of {} classes + AT", self.rows.len(), self.classes),
            ));
        }
        Ok(())
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Loss of one row and, when `grad` is given, its gradient.
fn at_row(s: &[f64], row: &RowLabels, grad: Option<&mut [f64]>) -> f64 {
    let at = s.len() - 1;
    let pos = &row.positives;
    let negatives = || (0..at).filter(|&j| row.is_active(j) && pos.binary_search(&j).is_err());

    let lse_p = log_sum_exp(pos.iter().map(|&j| s[j]).chain([s[at]]));
    let lse_n = log_sum_exp(negatives().map(|j| s[j]).chain([s[at]]));
    let loss = pos.iter().map(|&j| lse_p - s[j]).sum::<f64>() + (lse_n - s[at]);

    if let Some(g) = grad {
        let k = pos.len() as f64;
        for &j in pos {
            g[j] += k * (s[j] - lse_p).exp() - 1.0;
        }
        g[at] += k * (s[at] - lse_p).exp();
        for j in negatives() {
            g[j] += (s[j] - lse_n).exp();
        }
        g[at] += (s[at] - lse_n).exp() - 1.0;
    }
    loss
}

struct AtLoss {
    labels: PositionLabels,
    scale: f64,
}

impl<T: Float> Function<T> for AtLoss {
    fn name(&self) -> &'static str {
        "at_loss"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad_output: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let scores = inputs[0];
        let upstream = grad_output.item().as_f64() * self.scale;
        let cols = scores.cols();
        let mut out = vec![T::zero(); scores.numel()];
        let mut s = vec![0.0; cols];
        let mut g = vec![0.0; cols];
        for (i, row) in self.labels.rows.iter().enumerate() {
            if row.ignored {
                continue;
            }
            for (a, &b) in s.iter_mut().zip(scores.row(i)) {
                *a = b.as_f64();
            }
            g.fill(0.0);
            at_row(&s, row, Some(&mut g));
            for (o, &v) in out[i * cols..(i + 1) * cols].iter_mut().zip(&g) {
                *o = T::from_f64(v * upstream);
            }
        }
        vec![Some(Tensor::new(scores.shape().to_vec(), out).expect("shape preserved"))]
    }
}

/// Sum over rows of the adaptive-thresholding loss, multiplied by `scale`.
pub fn at_loss_scaled<T: Float>(tape: &mut Tape<'_, T>, scores: Var, labels: &PositionLabels, scale: f64) -> Result<Var> {
    let value = tape.value(scores);
    labels.check(value, "at_loss")?;
    let mut s = vec![0.0; value.cols()];
    let mut total = 0.0;
    for (i, row) in labels.rows.iter().enumerate() {
        if row.ignored {
            continue;
        }
        for (a, &b) in s.iter_mut().zip(value.row(i)) {
            *a = b.as_f64();
        }
        total += at_row(&s, row, None);
    }
    let out = Tensor::scalar(T::from_f64(total * scale));
    Ok(tape.apply(
        &[scores],
        out,
        Box::new(AtLoss {
            labels: labels.clone(),
            scale,
        }),
    ))
}

pub fn at_loss<T: Float>(tape: &mut Tape<'_, T>, scores: Var, labels: &PositionLabels) -> Result<Var> {
    at_loss_scaled(tape, scores, labels, 1.0)
}

/// `L = L^s + L^e`.
pub fn cascade_loss<T: Float>(
    tape: &mut Tape<'_, T>,
    start: Var,
    end: Var,
    start_labels: &PositionLabels,
    end_labels: &PositionLabels,
) -> Result<Var> {
    let ls = at_loss(tape, start, start_labels)?;
    let le = at_loss(tape, end, end_labels)?;
    tape.add(ls, le)
}

/// Labelled cells for the sigmoid variant: active, non-AT, non-ignored.
fn bce_cells(labels: &PositionLabels) -> usize {
    labels
        .rows
        .iter()
        .filter(|r| !r.ignored)
        .map(|r| (0..labels.classes).filter(|&j| r.is_active(j)).count())
        .sum()
}

fn bce_with_logits(s: f64, y: f64) -> f64 {
    s.max(0.0) - s * y + (-s.abs()).exp().ln_1p()
}

struct GlobalLoss {
    labels: PositionLabels,
    scale: f64,
}

impl<T: Float> Function<T> for GlobalLoss {
    fn name(&self) -> &'static str {
        "global_threshold_loss"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad_output: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let scores = inputs[0];
        let upstream = grad_output.item().as_f64() * self.scale;
        let cols = scores.cols();
        let mut out = vec![T::zero(); scores.numel()];
        for (i, row) in self.labels.rows.iter().enumerate() {
            if row.ignored {
                continue;
            }
            for j in (0..self.labels.classes).filter(|&j| row.is_active(j)) {
                let y = if row.positives.binary_search(&j).is_ok() { 1.0 } else { 0.0 };
                let p = crate::numerics::ops::sigmoid_scalar(scores.at(i, j).as_f64());
                out[i * cols + j] = T::from_f64((p - y) * upstream);
            }
        }
        vec![Some(Tensor::new(scores.shape().to_vec(), out).expect("shape preserved"))]
    }
}

/// Mean binary cross-entropy of `sigmoid(S)` over the labelled cells,
/// multiplied by `scale`. The AT column is not used.
pub fn global_threshold_loss_scaled<T: Float>(
    tape: &mut Tape<'_, T>,
    scores: Var,
    labels: &PositionLabels,
    scale: f64,
) -> Result<Var> {
    let value = tape.value(scores);
    labels.check(value, "global_threshold_loss")?;
    let cells = bce_cells(labels);
    let mut total = 0.0;
    for (i, row) in labels.rows.iter().enumerate() {
        if row.ignored {
            continue;
        }
        for j in (0..labels.classes).filter(|&j| row.is_active(j)) {
            let y = if row.positives.binary_search(&j).is_ok() { 1.0 } else { 0.0 };
            total += bce_with_logits(value.at(i, j).as_f64(), y);
        }
    }
    let per_cell = if cells == 0 { 0.0 } else { scale / cells as f64 };
    Ok(tape.apply(
        &[scores],
        Tensor::scalar(T::from_f64(total * per_cell)),
        Box::new(GlobalLoss {
            labels: labels.clone(),
            scale: per_cell,
        }),
    ))
}

pub fn global_threshold_loss<T: Float>(tape: &mut Tape<'_, T>, scores: Var, labels: &PositionLabels) -> Result<Var> {
    global_threshold_loss_scaled(tape, scores, labels, 1.0)
}

/// Which training objective the taggers use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Objective {
    #[default]
    AdaptiveThreshold,
    GlobalThreshold,
}

/// Scores and labels of one tagger (start and end) over a whole batch.
pub struct TaggerTerms<'a> {
    pub start: Var,
    pub end: Var,
    pub start_labels: &'a PositionLabels,
    pub end_labels: &'a PositionLabels,
}

/// Batch objective: the head-tagging loss of every sentence plus the
/// tail-tagging loss of every teacher-forced gold head, averaged over the
/// `batch_size` sentences. Rows of every sentence and head pass are
/// stacked, so per-row sums are already per-sentence sums. The BCE variant
/// is a mean over labelled cells of the batch instead.
pub fn total_loss<T: Float>(
    tape: &mut Tape<'_, T>,
    head: &TaggerTerms<'_>,
    tail: Option<&TaggerTerms<'_>>,
    batch_size: usize,
    objective: Objective,
) -> Result<Var> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let scale = match objective {
        Objective::AdaptiveThreshold => 1.0 / batch_size as f64,
        Objective::GlobalThreshold => 1.0,
    };
    let mut parts = Vec::with_capacity(4);
    for terms in std::iter::once(head).chain(tail) {
        for (scores, labels) in [(terms.start, terms.start_labels), (terms.end, terms.end_labels)] {
            parts.push(match objective {
                Objective::AdaptiveThreshold => at_loss_scaled(tape, scores, labels, scale)?,
                Objective::GlobalThreshold => global_threshold_loss_scaled(tape, scores, labels, scale)?,
            });
        }
    }
    let mut total = parts[0];
    for &p in &parts[1..] {
        total = tape.add(total, p)?;
    }
    Ok(total)
}
