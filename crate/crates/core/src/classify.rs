//! Shared classification-head machinery: global-average pooling, a linear
//! head, and softmax cross-entropy with its gradient. Used by extractor
//! pretraining and by the stage-2 finetune proxy.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::util::sample_standard_normal;

/// One patch with a class label attached.
#[derive(Debug, Clone)]
pub struct LabeledPatch {
    /// Pixels as a (1, 3, s, s) tensor.
    pub pixels: Tensor,
    pub class_id: usize,
}

/// Linear map from pooled feature width to class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub input_width: usize,
    pub class_count: usize,
    /// Row-major (class_count, input_width).
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl HeadParams {
    pub fn seeded(input_width: usize, class_count: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = 1.0 / (input_width as f64).sqrt();
        let weights = (0..class_count * input_width)
            .map(|_| (sample_standard_normal(rng) * std) as f32)
            .collect();
        HeadParams {
            input_width,
            class_count,
            weights,
            bias: vec![0.0; class_count],
        }
    }

    /// Logits for a row-major (n, input_width) feature matrix.
    pub fn logits(&self, features: &[f32], n: usize) -> Vec<f32> {
        let mut out = vec![0.0f32; n * self.class_count];
        for s in 0..n {
            let feat = &features[s * self.input_width..][..self.input_width];
            for k in 0..self.class_count {
                let row = &self.weights[k * self.input_width..][..self.input_width];
                let mut acc = f64::from(self.bias[k]);
                for (w, f) in row.iter().zip(feat) {
                    acc += f64::from(*w) * f64::from(*f);
                }
                out[s * self.class_count + k] = acc as f32;
            }
        }
        out
    }
}

/// Global average pool: (n, c, h, w) -> row-major (n, c).
pub fn gap_pool(t: &Tensor) -> Vec<f32> {
    let [n, c, h, w] = t.dims();
    let hw = (h * w) as f64;
    let mut out = vec![0.0f32; n * c];
    for b in 0..n {
        for ci in 0..c {
            let sum: f64 = t.plane(b, ci).iter().map(|&v| f64::from(v)).sum();
            out[b * c + ci] = (sum / hw) as f32;
        }
    }
    out
}

/// Spread a pooled-feature gradient back over the spatial plane.
pub fn gap_pool_grad(dims: [usize; 4], g_feat: &[f32]) -> Tensor {
    let [n, c, h, w] = dims;
    let scale = 1.0 / (h * w) as f32;
    let mut out = Tensor::zeros(dims);
    for b in 0..n {
        for ci in 0..c {
            let g = g_feat[b * c + ci] * scale;
            let base = ((b * c + ci) * h * w) as usize;
            for v in &mut out.data_mut()[base..base + h * w] {
                *v = g;
            }
        }
    }
    out
}

/// Mean softmax cross-entropy over a batch of logits, plus dL/dlogits.
pub fn softmax_cross_entropy(
    logits: &[f32],
    labels: &[usize],
    class_count: usize,
) -> Result<(f64, Vec<f32>)> {
    let n = labels.len();
    if logits.len() != n * class_count {
        return Err(Error::shape(format!(
            "{} logits for {n} samples x {class_count} classes",
            logits.len()
        )));
    }
    let mut grad = vec![0.0f32; logits.len()];
    let mut loss = 0.0f64;
    for (s, &label) in labels.iter().enumerate() {
        if label >= class_count {
            return Err(Error::value(format!(
                "label {label} outside {class_count} classes"
            )));
        }
        let row = &logits[s * class_count..][..class_count];
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f64> = row.iter().map(|&v| f64::from(v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let log_z = z.ln();
        loss += log_z - f64::from(row[label] - max);
        for k in 0..class_count {
            let p = exps[k] / z;
            let target = if k == label { 1.0 } else { 0.0 };
            grad[s * class_count + k] = ((p - target) / n as f64) as f32;
        }
    }
    Ok((loss / n as f64, grad))
}

/// Gradients of the head given pooled features and dL/dlogits; also returns
/// the gradient flowing back into the features.
pub fn head_backward(
    head: &HeadParams,
    features: &[f32],
    g_logits: &[f32],
    n: usize,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let (k, c) = (head.class_count, head.input_width);
    let mut g_w = vec![0.0f64; k * c];
    let mut g_b = vec![0.0f64; k];
    let mut g_feat = vec![0.0f64; n * c];
    for s in 0..n {
        let feat = &features[s * c..][..c];
        for kk in 0..k {
            let g = f64::from(g_logits[s * k + kk]);
            g_b[kk] += g;
            let row = &head.weights[kk * c..][..c];
            for i in 0..c {
                g_w[kk * c + i] += g * f64::from(feat[i]);
                g_feat[s * c + i] += g * f64::from(row[i]);
            }
        }
    }
    (
        g_w.iter().map(|&v| v as f32).collect(),
        g_b.iter().map(|&v| v as f32).collect(),
        g_feat.iter().map(|&v| v as f32).collect(),
    )
}

/// Fraction of samples whose argmax logit hits the label. Ties resolve to
/// the lowest class index.
pub fn accuracy(logits: &[f32], labels: &[usize], class_count: usize) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let mut hits = 0usize;
    for (s, &label) in labels.iter().enumerate() {
        let row = &logits[s * class_count..][..class_count];
        let mut best = 0usize;
        for k in 1..class_count {
            if row[k] > row[best] {
                best = k;
            }
        }
        if best == label {
            hits += 1;
        }
    }
    hits as f64 / labels.len() as f64
}

/// Distinct class ids present in a labeled corpus.
pub fn distinct_classes(samples: &[LabeledPatch]) -> usize {
    let mut seen = std::collections::BTreeSet::new();
    for s in samples {
        seen.insert(s.class_id);
    }
    seen.len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::seeded_rng;

    #[test]
    fn cross_entropy_matches_hand_computation() {
        // Two classes, logits (0, 0): loss = ln 2 regardless of label.
        let (loss, grad) = softmax_cross_entropy(&[0.0, 0.0], &[1], 2).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-9);
        assert!((grad[0] - 0.5).abs() < 1e-6);
        assert!((grad[1] + 0.5).abs() < 1e-6);

        assert!(softmax_cross_entropy(&[0.0, 0.0], &[2], 2).is_err());
        assert!(softmax_cross_entropy(&[0.0], &[0], 2).is_err());
    }

    #[test]
    fn gap_pool_and_grad_are_consistent() {
        let t = Tensor::from_vec([1, 2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 0.0, 0.0, 4.0, 4.0])
            .unwrap();
        let pooled = gap_pool(&t);
        assert_eq!(pooled, vec![2.5, 2.0]);
        let g = gap_pool_grad(t.dims(), &[4.0, 8.0]);
        assert!(g.data()[..4].iter().all(|&v| v == 1.0));
        assert!(g.data()[4..].iter().all(|&v| v == 2.0));
    }

    #[test]
    fn head_logits_and_accuracy() {
        let mut rng = seeded_rng(3);
        let head = HeadParams::seeded(4, 3, &mut rng);
        assert_eq!(head.weights.len(), 12);

        let ident = HeadParams {
            input_width: 2,
            class_count: 2,
            weights: vec![1.0, 0.0, 0.0, 1.0],
            bias: vec![0.0, 0.0],
        };
        let logits = ident.logits(&[3.0, 1.0, 0.0, 2.0], 2);
        assert_eq!(logits, vec![3.0, 1.0, 0.0, 2.0]);
        assert_eq!(accuracy(&logits, &[0, 1], 2), 1.0);
        assert_eq!(accuracy(&logits, &[1, 0], 2), 0.0);
    }
}
