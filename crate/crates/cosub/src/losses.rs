//! Classification losses and the combined co-training objective.
//!
//! The total objective mixes a label loss with a soft-target consistency
//! loss between two submodel outputs:
//! `total = lambda * (L(y1, y) + L(y2, y)) / 2
//!        + (1 - lambda) * (L(y1, sg(y2)) + L(y2, sg(y1))) / 2`,
//! where `sg` is the stop-gradient operator — no gradient ever reaches the
//! branch serving as a teacher.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Loss used for the consistency (teacher) term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    /// Binary cross-entropy against the teacher's sigmoid probabilities.
    BceSoft,
    /// Binary cross-entropy against the one-hot argmax of the teacher.
    BceHard,
    /// Softmax cross-entropy against the one-hot argmax of the teacher.
    CeHard,
}

/// Loss used for the label term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelLossKind {
    Bce,
    Ce,
}

/// Weighting and flavor of the co-training objective.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CosubConfig {
    /// Label-loss weight in `[0, 1]`; 1 is the supervised baseline, 0.5 the
    /// default equal mix.
    pub lambda: f64,
    pub loss_kind: LossKind,
    /// Label smoothing mass spread uniformly over classes (default 0).
    pub label_smoothing: f64,
}

impl Default for CosubConfig {
    fn default() -> Self {
        CosubConfig { lambda: 0.5, loss_kind: LossKind::BceSoft, label_smoothing: 0.0 }
    }
}

impl CosubConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid("cosub_config", format!("lambda {} not in [0, 1]", self.lambda)));
        }
        if self.label_smoothing < 0.0 {
            return Err(Error::invalid("cosub_config", "negative label smoothing"));
        }
        Ok(())
    }
}

/// Tape handles for the three loss components.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub label: Var,
    pub cosub: Var,
}

/// Scalar values of the three loss components.
/// `total == lambda * label_part + (1 - lambda) * cosub_part`.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossBundle {
    pub total: f64,
    pub label_part: f64,
    pub cosub_part: f64,
}

impl LossBundle {
    pub fn from_parts<E: Element>(tape: &Tape<E>, parts: &LossParts) -> Result<Self> {
        Ok(LossBundle {
            total: tape.value(parts.total).item()?.to_f64(),
            label_part: tape.value(parts.label).item()?.to_f64(),
            cosub_part: tape.value(parts.cosub).item()?.to_f64(),
        })
    }
}

/// Smoothed one-hot targets: `t_c = smoothing / C + (1 - smoothing) * [c == y]`.
pub fn one_hot<E: Element>(labels: &[u32], classes: usize, smoothing: f64) -> Result<Tensor<E>> {
    let off = smoothing / classes as f64;
    let on = off + (1.0 - smoothing);
    let mut data = vec![E::from_f64(off); labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        if y as usize >= classes {
            return Err(Error::IndexOutOfRange { op: "one_hot", index: y as usize, size: classes });
        }
        data[i * classes + y as usize] = E::from_f64(on);
    }
    Tensor::new(vec![labels.len(), classes], data)
}

fn argmax_one_hot<E: Element>(logits: &Tensor<E>) -> Tensor<E> {
    let classes = *logits.shape().last().unwrap();
    let rows = logits.numel() / classes;
    let mut data = vec![E::ZERO; logits.numel()];
    for r in 0..rows {
        let row = &logits.data()[r * classes..(r + 1) * classes];
        let mut best = 0usize;
        for (j, v) in row.iter().enumerate() {
            if *v > row[best] {
                best = j;
            }
        }
        data[r * classes + best] = E::ONE;
    }
    Tensor::new(logits.shape().to_vec(), data).expect("argmax shape")
}

/// Label loss against class indices. BCE averages sigmoid binary
/// cross-entropy over samples and classes; CE averages softmax cross-entropy
/// over samples.
pub fn label_loss<E: Element>(
    tape: &mut Tape<E>,
    logits: Var,
    labels: &[u32],
    kind: LabelLossKind,
    smoothing: f64,
) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::invalid(
            "label_loss",
            format!("logits {shape:?} vs {} labels", labels.len()),
        ));
    }
    let targets = one_hot::<E>(labels, shape[1], smoothing)?;
    let t = tape.constant(targets);
    match kind {
        LabelLossKind::Bce => tape.bce_with_logits(logits, t),
        LabelLossKind::Ce => tape.ce_with_logits(logits, t),
    }
}

/// One direction of distillation: the loss of `student` against the frozen
/// targets derived from `teacher`. No gradient flows into `teacher`.
pub fn distill_loss<E: Element>(
    tape: &mut Tape<E>,
    student: Var,
    teacher: Var,
    kind: LossKind,
) -> Result<Var> {
    if tape.shape(student) != tape.shape(teacher) {
        return Err(Error::ShapeMismatch {
            op: "distill_loss",
            lhs: tape.shape(student).to_vec(),
            rhs: tape.shape(teacher).to_vec(),
        });
    }
    match kind {
        LossKind::BceSoft => {
            let frozen = tape.stop_grad(teacher);
            let targets = tape.sigmoid(frozen);
            tape.bce_with_logits(student, targets)
        }
        LossKind::BceHard => {
            let targets = argmax_one_hot(tape.value(teacher));
            let t = tape.constant(targets);
            tape.bce_with_logits(student, t)
        }
        LossKind::CeHard => {
            let targets = argmax_one_hot(tape.value(teacher));
            let t = tape.constant(targets);
            tape.ce_with_logits(student, t)
        }
    }
}

/// Symmetrized consistency loss `(L(y1, sg(y2)) + L(y2, sg(y1))) / 2`.
pub fn cosub_pair_loss<E: Element>(
    tape: &mut Tape<E>,
    y1: Var,
    y2: Var,
    kind: LossKind,
) -> Result<Var> {
    let a = distill_loss(tape, y1, y2, kind)?;
    let b = distill_loss(tape, y2, y1, kind)?;
    let sum = tape.add(a, b)?;
    Ok(tape.scale(sum, E::from_f64(0.5)))
}

/// Combined objective for a pair of submodel outputs.
///
/// At the endpoints the inactive term is detached from the total (weight
/// exactly zero, not merely multiplied by zero), so `lambda = 1` is
/// gradient-for-gradient the supervised baseline.
pub fn total_loss<E: Element>(
    tape: &mut Tape<E>,
    y1: Var,
    y2: Var,
    labels: &[u32],
    config: &CosubConfig,
    label_kind: LabelLossKind,
) -> Result<LossParts> {
    config.validate()?;
    let l1 = label_loss(tape, y1, labels, label_kind, config.label_smoothing)?;
    let l2 = label_loss(tape, y2, labels, label_kind, config.label_smoothing)?;
    let lsum = tape.add(l1, l2)?;
    let label = tape.scale(lsum, E::from_f64(0.5));
    let cosub = cosub_pair_loss(tape, y1, y2, config.loss_kind)?;
    let total = mix_losses(tape, label, cosub, config.lambda)?;
    Ok(LossParts { total, label, cosub })
}

/// `lambda * label + (1 - lambda) * cosub` with exact endpoint handling.
pub fn mix_losses<E: Element>(
    tape: &mut Tape<E>,
    label: Var,
    cosub: Var,
    lambda: f64,
) -> Result<Var> {
    if lambda == 1.0 {
        Ok(label)
    } else if lambda == 0.0 {
        Ok(cosub)
    } else {
        let a = tape.scale(label, E::from_f64(lambda));
        let b = tape.scale(cosub, E::from_f64(1.0 - lambda));
        tape.add(a, b)
    }
}
