//! Scalar loss kernels shared by the autodiff ops and by inference code.

use super::{Float, Result, TensorError};

pub fn softmax_in_place(row: &mut [Float]) {
    let max = row.iter().copied().fold(Float::NEG_INFINITY, Float::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax(logits: &[Float]) -> Vec<Float> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    out
}

/// `-log softmax(logits)[label]`.
pub fn cross_entropy_value(logits: &[Float], label: usize) -> Result<Float> {
    if label >= logits.len() {
        return Err(TensorError::IndexOutOfRange {
            op: "cross_entropy",
            index: label,
            size: logits.len(),
        });
    }
    Ok(cross_entropy_forward(logits, label, None))
}

pub(crate) fn check_label_set(labels: &[usize], classes: usize) -> Result<()> {
    if labels.is_empty() {
        return Err(TensorError::InvalidArgument {
            op: "concurrent_softmax_loss",
            msg: "label set is empty".into(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(TensorError::IndexOutOfRange {
            op: "concurrent_softmax_loss",
            index: bad,
            size: classes,
        });
    }
    let mut seen = vec![false; classes];
    for &l in labels {
        if std::mem::replace(&mut seen[l], true) {
            return Err(TensorError::InvalidArgument {
                op: "concurrent_softmax_loss",
                msg: format!("label {l} repeated"),
            });
        }
    }
    Ok(())
}

/// Concurrent-softmax cross entropy over a label set, divided by the number
/// of labels.
///
/// Each positive class competes only against the negative classes:
/// `sigma_i = e^{z_i} / (sum_{j not in labels} e^{z_j} + e^{z_i})`.
pub fn concurrent_softmax_loss_value(logits: &[Float], labels: &[usize]) -> Result<Float> {
    check_label_set(labels, logits.len())?;
    Ok(concurrent_softmax_forward(logits, labels, None))
}

/// Loss for one row. When `grad` is given, writes d(loss)/d(logits) into it.
pub(crate) fn concurrent_softmax_forward(
    logits: &[Float],
    labels: &[usize],
    grad: Option<&mut [Float]>,
) -> Float {
    let c = logits.len();
    let max = logits.iter().copied().fold(Float::NEG_INFINITY, Float::max);
    let mut is_label = vec![false; c];
    for &l in labels {
        is_label[l] = true;
    }
    // negative mass, shifted by max
    let neg: Float = (0..c)
        .filter(|&j| !is_label[j])
        .map(|j| (logits[j] - max).exp())
        .sum();
    let k = labels.len() as Float;
    let mut loss = 0.0;
    // inv_denoms[i] = 1 / (neg + e^{z_i - max})
    let mut inv_sum = 0.0;
    let mut sigmas = Vec::with_capacity(labels.len());
    for &i in labels {
        let ei = (logits[i] - max).exp();
        let denom = neg + ei;
        loss += if neg <= ei {
            (neg / ei).ln_1p()
        } else {
            denom.ln() - (logits[i] - max)
        };
        inv_sum += 1.0 / denom;
        sigmas.push(ei / denom);
    }
    if let Some(grad) = grad {
        for j in 0..c {
            grad[j] = if is_label[j] {
                0.0
            } else {
                (logits[j] - max).exp() * inv_sum / k
            };
        }
        for (&i, s) in labels.iter().zip(sigmas) {
            grad[i] = -(1.0 - s) / k;
        }
    }
    loss / k
}

/// Cross entropy for one row, with optional gradient output.
pub(crate) fn cross_entropy_forward(
    logits: &[Float],
    label: usize,
    grad: Option<&mut [Float]>,
) -> Float {
    // (max - z_label) + ln(sum e^{z - max}) keeps precision for confident rows
    let max = logits.iter().copied().fold(Float::NEG_INFINITY, Float::max);
    let sum: Float = logits.iter().map(|z| (z - max).exp()).sum();
    if let Some(grad) = grad {
        for (g, &z) in grad.iter_mut().zip(logits) {
            *g = (z - max).exp() / sum;
        }
        grad[label] -= 1.0;
    }
    (max - logits[label]) + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_uniform() {
        let v = cross_entropy_value(&[0.5; 4], 2).unwrap();
        assert!((v - (4.0 as Float).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_confident() {
        // ln(1 + e^-20)
        let v = cross_entropy_value(&[10.0, -10.0], 0).unwrap();
        assert!((v - 2.061_153_618_190_204e-9).abs() < 1e-16, "{v}");
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        assert!(matches!(
            cross_entropy_value(&[0.0, 0.0], 2),
            Err(TensorError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn cross_entropy_gradient_closed_form() {
        let z = [0.3, -1.2, 2.0, 0.1];
        let mut g = [0.0; 4];
        cross_entropy_forward(&z, 1, Some(&mut g));
        let p = softmax(&z);
        for i in 0..4 {
            let expect = p[i] - if i == 1 { 1.0 } else { 0.0 };
            assert!((g[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn concurrent_two_labels_uniform() {
        let v = concurrent_softmax_loss_value(&[0.0, 0.0, 0.0], &[0, 1]).unwrap();
        assert!((v - (2.0 as Float).ln()).abs() < 1e-12);
    }

    #[test]
    fn concurrent_all_labels_is_zero() {
        let v = concurrent_softmax_loss_value(&[0.4, -2.0, 1.5], &[0, 1, 2]).unwrap();
        assert_eq!(v, 0.0);
        let z = [0.0, 10.187103285457033, 0.0, 0.0, 0.0, 9.989566049883965, 0.0, 0.0];
        let labels: Vec<usize> = (0..z.len()).collect();
        assert_eq!(concurrent_softmax_loss_value(&z, &labels).unwrap(), 0.0);
    }

    #[test]
    fn concurrent_singleton_is_cross_entropy() {
        let z = [0.4, -2.0, 1.5, 0.0];
        for l in 0..4 {
            let a = concurrent_softmax_loss_value(&z, &[l]).unwrap();
            let b = cross_entropy_value(&z, l).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn concurrent_rejects_bad_labels() {
        assert!(concurrent_softmax_loss_value(&[0.0, 0.0], &[]).is_err());
        assert!(concurrent_softmax_loss_value(&[0.0, 0.0], &[2]).is_err());
        assert!(concurrent_softmax_loss_value(&[0.0, 0.0], &[1, 1]).is_err());
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1.0, 2.0, 3.0, -700.0]);
        assert!((p.iter().sum::<Float>() - 1.0).abs() < 1e-12);
    }
}
