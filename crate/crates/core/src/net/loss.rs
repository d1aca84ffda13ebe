use crate::error::{AcatError, Result};
use crate::tensor::{ActivationTensor, BinaryMask, LabelMap};

/// Per-pixel class targets for cross-entropy.
#[derive(Debug, Clone, Copy)]
pub enum LossTarget<'a> {
    Labels(&'a LabelMap),
    /// The same class at every pixel.
    Uniform(usize),
}

impl LossTarget<'_> {
    #[inline]
    fn class_at(&self, i: usize, j: usize) -> usize {
        match self {
            LossTarget::Labels(l) => usize::from(l.get(i, j)),
            LossTarget::Uniform(c) => *c,
        }
    }
}

/// Mean cross-entropy and its gradient with respect to the logits.
#[derive(Debug, Clone)]
pub struct CrossEntropy {
    pub loss: f64,
    pub grad: ActivationTensor,
    /// Number of pixels that contributed.
    pub pixels: usize,
}

/// Softmax cross-entropy averaged over the pixels where `include` is 1 (all
/// pixels when `None`). With no included pixels the loss and gradient are 0.
pub fn softmax_cross_entropy(
    logits: &ActivationTensor,
    target: LossTarget<'_>,
    include: Option<&BinaryMask>,
) -> Result<CrossEntropy> {
    let (classes, h, w) = logits.dims();
    if let LossTarget::Labels(l) = target {
        if (l.height, l.width) != (h, w) {
            return Err(AcatError::config(format!(
                "labels {}x{} vs logits {h}x{w}",
                l.height, l.width
            )));
        }
    }
    if let Some(m) = include {
        if m.dims() != (h, w) {
            return Err(AcatError::config("loss mask dims differ from logits"));
        }
    }
    let pixels = include.map_or(h * w, BinaryMask::count_ones);
    let mut grad = ActivationTensor::zeros(classes, h, w);
    if pixels == 0 {
        return Ok(CrossEntropy {
            loss: 0.0,
            grad,
            pixels,
        });
    }
    let scale = 1.0 / pixels as f64;
    let mut total = 0.0;
    let mut probs = vec![0.0; classes];
    for i in 0..h {
        for j in 0..w {
            if include.is_some_and(|m| m.get(i, j) == 0) {
                continue;
            }
            let y = target.class_at(i, j);
            if y >= classes {
                return Err(AcatError::Data(format!(
                    "label {y} at ({i},{j}) is out of range for {classes} classes"
                )));
            }
            let max = (0..classes).map(|c| logits.get(c, i, j)).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (c, p) in probs.iter_mut().enumerate() {
                *p = (logits.get(c, i, j) - max).exp();
                z += *p;
            }
            total += z.ln() + max - logits.get(y, i, j);
            for (c, p) in probs.iter().enumerate() {
                let g = p / z - if c == y { 1.0 } else { 0.0 };
                grad.set(c, i, j, g * scale);
            }
        }
    }
    Ok(CrossEntropy {
        loss: total * scale,
        grad,
        pixels,
    })
}

/// Per-pixel argmax over channels.
pub fn argmax_labels(logits: &ActivationTensor) -> LabelMap {
    let (classes, h, w) = logits.dims();
    let mut data = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let mut best = 0;
            for c in 1..classes {
                if logits.get(c, i, j) > logits.get(best, i, j) {
                    best = c;
                }
            }
            data.push(best as u8);
        }
    }
    LabelMap {
        height: h,
        width: w,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_classes() {
        let logits = ActivationTensor::zeros(4, 2, 3);
        let ce = softmax_cross_entropy(&logits, LossTarget::Uniform(1), None).unwrap();
        assert!((ce.loss - 4f64.ln()).abs() < 1e-12);
        assert_eq!(ce.pixels, 6);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let logits = ActivationTensor::from_fn(3, 2, 2, |c, i, j| ((c * 7 + i * 3 + j) % 5) as f64 * 0.4 - 0.6);
        let labels = LabelMap {
            height: 2,
            width: 2,
            data: vec![0, 2, 1, 2],
        };
        let mask = BinaryMask::new(2, 2, vec![1, 1, 0, 1]).unwrap();
        let ce = softmax_cross_entropy(&logits, LossTarget::Labels(&labels), Some(&mask)).unwrap();
        let eps = 1e-6;
        for k in 0..logits.data().len() {
            let mut p = logits.data().to_vec();
            p[k] += eps;
            let up = ActivationTensor::new(3, 2, 2, p.clone()).unwrap();
            p[k] -= 2.0 * eps;
            let dn = ActivationTensor::new(3, 2, 2, p).unwrap();
            let f = |t: &ActivationTensor| {
                softmax_cross_entropy(t, LossTarget::Labels(&labels), Some(&mask)).unwrap().loss
            };
            let fd = (f(&up) - f(&dn)) / (2.0 * eps);
            assert!((fd - ce.grad.data()[k]).abs() < 1e-7);
        }
    }

    #[test]
    fn out_of_range_label() {
        let logits = ActivationTensor::zeros(2, 1, 1);
        assert!(matches!(
            softmax_cross_entropy(&logits, LossTarget::Uniform(2), None),
            Err(AcatError::Data(_))
        ));
    }

    #[test]
    fn empty_mask_is_zero_loss() {
        let logits = ActivationTensor::zeros(2, 2, 2);
        let ce = softmax_cross_entropy(&logits, LossTarget::Uniform(0), Some(&BinaryMask::zeros(2, 2))).unwrap();
        assert_eq!(ce.loss, 0.0);
        assert_eq!(ce.pixels, 0);
    }
}
