//! Final segmentation from the intersection/extra channel pairs.
//!
//! Intersection and extra parts of a class are disjoint, so the class score
//! is their sum clamped at one. Background either reads its own channel pair
//! or, when it has no supervised pair, takes `1 - max` of the foreground scores.

use serde::{Deserialize, Serialize};

use crate::losses::PairwisePrediction;
use crate::plane::Plane;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundRule {
    /// `1 - max_k p_k` over the foreground classes.
    #[default]
    Complement,
    /// The background class's own channel pair.
    Channel,
}

/// Per-class score maps plus the hard label map.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub scores: Vec<Plane>,
    pub labels: Vec<u8>,
}

/// `min(inter_k + extra_k, 1)` for every pixel.
pub fn class_probability(pred: &PairwisePrediction, class: usize) -> Vec<f64> {
    pred.inter(class)
        .iter()
        .zip(pred.extra(class))
        .map(|(a, b)| (a + b).min(1.0))
        .collect()
}

/// Class scores of one pixel into `out` (length `m`).
pub(crate) fn pixel_scores(pred: &PairwisePrediction, pixel: usize, rule: BackgroundRule, out: &mut [f64]) {
    let m = pred.m();
    for (k, o) in out.iter_mut().enumerate().take(m) {
        *o = (pred.get(2 * k, pixel) + pred.get(2 * k + 1, pixel)).min(1.0);
    }
    if rule == BackgroundRule::Complement {
        let max_fg = out[1..m].iter().copied().fold(0.0, f64::max);
        out[0] = 1.0 - max_fg;
    }
}

/// Chains `d_scores` (gradient w.r.t. the class scores of one pixel) back to
/// the channel probabilities, accumulating into `d_probs` (channel-major).
pub(crate) fn pixel_scores_backward(
    pred: &PairwisePrediction,
    pixel: usize,
    rule: BackgroundRule,
    d_scores: &[f64],
    d_probs: &mut [f64],
) {
    let m = pred.m();
    let k_pixels = pred.pixels();
    let mut d_class = d_scores.to_vec();
    if rule == BackgroundRule::Complement {
        // background = 1 - p_argmax; ties go to the lowest foreground index
        let mut best = 1;
        let mut best_v = f64::NEG_INFINITY;
        for k in 1..m {
            let v = (pred.get(2 * k, pixel) + pred.get(2 * k + 1, pixel)).min(1.0);
            if v > best_v {
                best_v = v;
                best = k;
            }
        }
        d_class[best] -= d_scores[0];
        d_class[0] = 0.0;
    }
    for (k, &g) in d_class.iter().enumerate().take(m) {
        if pred.get(2 * k, pixel) + pred.get(2 * k + 1, pixel) < 1.0 {
            d_probs[2 * k * k_pixels + pixel] += g;
            d_probs[(2 * k + 1) * k_pixels + pixel] += g;
        }
    }
}

/// Per-class scores and the argmax label map (ties to the lowest class index).
pub fn assemble_segmentation(pred: &PairwisePrediction, rule: BackgroundRule) -> Segmentation {
    let m = pred.m();
    let k = pred.pixels();
    let mut scores = vec![vec![0.0; k]; m];
    let mut labels = vec![0u8; k];
    let mut px = vec![0.0; m];
    for i in 0..k {
        pixel_scores(pred, i, rule, &mut px);
        let mut best = 0;
        for c in 0..m {
            scores[c][i] = px[c];
            if px[c] > px[best] {
                best = c;
            }
        }
        labels[i] = best as u8;
    }
    Segmentation {
        scores: scores
            .into_iter()
            .map(|s| Plane::new(pred.height(), pred.width(), s).expect("shape matches prediction"))
            .collect(),
        labels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_pixel(values: &[f64]) -> PairwisePrediction {
        PairwisePrediction::new(values.len() / 2, 1, 1, values.to_vec()).unwrap()
    }

    #[test]
    fn class_scores_add_and_clamp() {
        let p = single_pixel(&[0.0, 0.0, 1.0, 0.0]);
        assert_eq!(class_probability(&p, 1), vec![1.0]);
        let p = single_pixel(&[0.0, 0.0, 0.3, 0.4]);
        assert!((class_probability(&p, 1)[0] - 0.7).abs() < 1e-12);
        let p = single_pixel(&[0.0, 0.0, 0.8, 0.9]);
        assert_eq!(class_probability(&p, 1), vec![1.0]);
    }

    #[test]
    fn zero_channels_give_background() {
        let p = PairwisePrediction::new(4, 2, 2, vec![0.0; 32]).unwrap();
        for rule in [BackgroundRule::Complement, BackgroundRule::Channel] {
            assert!(assemble_segmentation(&p, rule).labels.iter().all(|&l| l == 0));
        }
    }

    #[test]
    fn argmax_ties_break_low() {
        let p = single_pixel(&[0.0, 0.0, 0.6, 0.0, 0.3, 0.3]);
        let seg = assemble_segmentation(&p, BackgroundRule::Complement);
        assert_eq!(seg.labels, vec![1]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let base = vec![0.1, 0.2, 0.3, 0.15, 0.05, 0.5, 0.2, 0.1];
        let d_scores = [0.7, -0.3, 1.1, 0.5];
        for rule in [BackgroundRule::Complement, BackgroundRule::Channel] {
            let pred = PairwisePrediction::new(4, 1, 1, base.clone()).unwrap();
            let mut grad = vec![0.0; 8];
            pixel_scores_backward(&pred, 0, rule, &d_scores, &mut grad);
            let f = |v: &[f64]| {
                let p = PairwisePrediction::new(4, 1, 1, v.to_vec()).unwrap();
                let mut s = vec![0.0; 4];
                pixel_scores(&p, 0, rule, &mut s);
                s.iter().zip(&d_scores).map(|(a, b)| a * b).sum::<f64>()
            };
            for c in 0..8 {
                let mut up = base.clone();
                up[c] += 1e-6;
                let mut dn = base.clone();
                dn[c] -= 1e-6;
                let fd = (f(&up) - f(&dn)) / 2e-6;
                assert!((fd - grad[c]).abs() < 1e-6, "{rule:?} channel {c}");
            }
        }
    }
}
