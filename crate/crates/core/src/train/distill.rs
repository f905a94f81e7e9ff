use crate::error::{Error, Result};
use crate::model::{qa_loss, SpanLogits};
use crate::tensor::{Graph, Tensor, Var};

/// `alpha * T² * KL(teacher_T || student_T) + (1 - alpha) * hard-target loss`.
///
/// The KL term is averaged over the start and end distributions and over the
/// batch; `teacher_logits` is `[batch, seq, 2]` and enters as a constant.
pub fn distillation_loss(
    g: &mut Graph,
    student: &SpanLogits,
    teacher_logits: &Tensor,
    starts: &[usize],
    ends: &[usize],
    temperature: f32,
    alpha: f32,
) -> Result<Var> {
    let sshape = g.value(student.logits).shape().to_vec();
    if teacher_logits.shape() != sshape.as_slice() {
        return Err(Error::Dimension {
            op: "distillation_loss",
            lhs: sshape,
            rhs: teacher_logits.shape().to_vec(),
        });
    }
    let (batch, seq) = (sshape[0], sshape[1]);
    let mut kl_total = None;
    for (col, side) in [(0usize, student.start), (1, student.end)] {
        let (log_p, p) = teacher_distribution(teacher_logits, col, batch, seq, temperature)?;
        let log_p = g.constant(log_p)?;
        let p = g.constant(p)?;
        let scaled = g.scale(side, 1.0 / temperature)?;
        let log_q = g.log_softmax(scaled)?;
        let diff = g.sub(log_p, log_q)?;
        let weighted = g.mul(p, diff)?;
        let kl = g.sum(weighted)?;
        kl_total = Some(match kl_total {
            None => kl,
            Some(prev) => g.add(prev, kl)?,
        });
    }
    let kl = kl_total.expect("two sides");
    // mean over batch and over the two distributions, times T²
    let soft = g.scale(kl, alpha * temperature * temperature / (2.0 * batch as f32))?;
    let hard = qa_loss(g, student, starts, ends)?;
    let hard = g.scale(hard, 1.0 - alpha)?;
    g.add(soft, hard)
}

/// Teacher log-probabilities and probabilities at temperature `t` for one
/// logit column, shaped `[batch, seq]`.
fn teacher_distribution(
    logits: &Tensor,
    col: usize,
    batch: usize,
    seq: usize,
    t: f32,
) -> Result<(Tensor, Tensor)> {
    let mut log_p = Vec::with_capacity(batch * seq);
    for b in 0..batch {
        let row: Vec<f32> = (0..seq).map(|s| logits.data()[(b * seq + s) * 2 + col] / t).collect();
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f32>().ln();
        log_p.extend(row.iter().map(|v| v - lse));
    }
    let p = log_p.iter().map(|v| v.exp()).collect();
    Ok((Tensor::new(vec![batch, seq], log_p)?, Tensor::new(vec![batch, seq], p)?))
}
