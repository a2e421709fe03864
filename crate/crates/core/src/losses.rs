//! Pixel- and image-level losses.
//!
//! Every loss here is the negated log-likelihood form, so smaller is better.
//! Probabilities are clamped to `[eps, 1 - eps]` before taking logs; the
//! reported gradients are those of the clamped expression (zero where the
//! clamp is active).
//!
//! Pairwise predictions carry `2m` independent per-channel probabilities:
//! channel `2k` scores membership in the intersection of class `k` with its
//! conditional mask, channel `2k + 1` the extra part outside the mask.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label_model::{ChannelMask, ClassSet, LabelKind, LabelVector, SENTINEL};
use crate::network::assemble::{self, BackgroundRule};
use crate::pairing::{ConditionalLabels, PairwiseTarget};

/// How the per-pixel losses of an image are weighted before summation.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelWeighting {
    /// `1/K` for every pixel.
    #[default]
    Uniform,
    /// Proportional to the inverse frequency of the pixel's label value
    /// (unlabeled pixels form their own group), normalized to sum to one.
    InverseClassFrequency,
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub weighting: PixelWeighting,
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weighting: PixelWeighting::Uniform,
            epsilon: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1e-3) {
            return Err(Error::Config(format!(
                "epsilon must lie in (0, 1e-3), got {}",
                self.epsilon
            )));
        }
        if let PixelWeighting::Explicit(w) = &self.weighting {
            if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::Config("pixel weights must be finite and >= 0".into()));
            }
            if w.iter().sum::<f64>() <= 0.0 {
                return Err(Error::Config("pixel weights must not all be zero".into()));
            }
        }
        Ok(())
    }

    /// Per-pixel weights for an image with the given label values.
    pub fn pixel_weights(&self, labels: &[u8]) -> Result<Vec<f64>> {
        self.validate()?;
        let k = labels.len();
        match &self.weighting {
            PixelWeighting::Uniform => Ok(vec![1.0 / k as f64; k]),
            PixelWeighting::InverseClassFrequency => {
                let mut counts = [0usize; 256];
                for &v in labels {
                    counts[v as usize] += 1;
                }
                let raw: Vec<f64> = labels.iter().map(|&v| 1.0 / counts[v as usize] as f64).collect();
                let total: f64 = raw.iter().sum();
                Ok(raw.into_iter().map(|w| w / total).collect())
            }
            PixelWeighting::Explicit(w) => {
                if w.len() != k {
                    return Err(Error::ShapeMismatch(format!(
                        "{} pixel weights for {k} pixels",
                        w.len()
                    )));
                }
                Ok(w.clone())
            }
        }
    }
}

/// Loss value of one pixel with its gradient with respect to the prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelLoss {
    pub value: f64,
    pub grad: Vec<f64>,
    /// Set when no channel carried a constraint; the value is then 0.
    pub no_known_channels: bool,
}

/// Per-channel probabilities of the `2m`-channel pairwise output, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwisePrediction {
    m: usize,
    height: usize,
    width: usize,
    probs: Vec<f64>,
}

impl PairwisePrediction {
    pub fn new(m: usize, height: usize, width: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != 2 * m * height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} probabilities for 2m={} channels of {height}x{width}",
                probs.len(),
                2 * m
            )));
        }
        if let Some((i, &v)) = probs
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(Error::InvalidProbability {
                index: i / (height * width),
                value: v,
            });
        }
        Ok(Self {
            m,
            height,
            width,
            probs,
        })
    }

    /// Logistic of each logit, evaluated in double precision.
    pub fn from_logits(m: usize, height: usize, width: usize, logits: &[f64]) -> Result<Self> {
        Self::new(m, height, width, logits.iter().map(|&z| sigmoid(z)).collect())
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn channels(&self) -> usize {
        2 * self.m
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let k = self.pixels();
        &self.probs[c * k..(c + 1) * k]
    }

    pub fn inter(&self, class: usize) -> &[f64] {
        self.channel(2 * class)
    }

    pub fn extra(&self, class: usize) -> &[f64] {
        self.channel(2 * class + 1)
    }

    pub fn get(&self, channel: usize, pixel: usize) -> f64 {
        self.probs[channel * self.pixels() + pixel]
    }

    /// All `2m` channel values of one pixel.
    pub fn pixel(&self, pixel: usize) -> Vec<f64> {
        (0..self.channels()).map(|c| self.get(c, pixel)).collect()
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Clamped binary cross-entropy of one channel and its derivative in `p`.
#[inline]
fn bce(p: f64, y: f64, eps: f64) -> (f64, f64) {
    let interior = p > eps && p < 1.0 - eps;
    let pc = p.clamp(eps, 1.0 - eps);
    let mut value = 0.0;
    let mut grad = 0.0;
    if y != 0.0 {
        value -= y * pc.ln();
        grad -= y / pc;
    }
    if y != 1.0 {
        value -= (1.0 - y) * (1.0 - pc).ln();
        grad += (1.0 - y) / (1.0 - pc);
    }
    (value, if interior { grad } else { 0.0 })
}

fn check_probs(pred: &[f64]) -> Result<()> {
    match pred
        .iter()
        .enumerate()
        .find(|(_, v)| !v.is_finite() || **v < 0.0 || **v > 1.0)
    {
        Some((index, &value)) => Err(Error::InvalidProbability { index, value }),
        None => Ok(()),
    }
}

fn check_binary(values: &[f64], what: &str) -> Result<()> {
    if let Some(v) = values.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidLabel(format!("{what} entry {v} is not 0 or 1")));
    }
    Ok(())
}

/// Compatible cross-entropy of one pixel, summed over the known channels.
///
/// With every channel known and a one-hot target this is the usual per-channel
/// binary cross-entropy; with only the annotated channels known and a zero
/// target it reduces to `-sum log(1 - p_j)` over the annotated classes.
/// Works on `m`-channel plain outputs as well as `2m`-channel pairwise outputs.
pub fn compatible_ce_pixel(
    pred: &[f64],
    target: &[f64],
    known: &ChannelMask,
    cfg: &LossConfig,
) -> Result<PixelLoss> {
    if pred.len() != target.len() || pred.len() != known.len() {
        return Err(Error::ShapeMismatch(format!(
            "pred {}, target {}, known {}",
            pred.len(),
            target.len(),
            known.len()
        )));
    }
    check_probs(pred)?;
    check_binary(target, "target")?;
    let mut grad = vec![0.0; pred.len()];
    let mut value = 0.0;
    for c in known.known() {
        let (v, g) = bce(pred[c], target[c], cfg.epsilon);
        value += v;
        grad[c] = g;
    }
    Ok(PixelLoss {
        value,
        grad,
        no_known_channels: known.count() == 0,
    })
}

/// Inclusiveness/exclusiveness loss of one pixel over the unannotated classes.
///
/// For each class `j` outside `annotated`: where the conditional mask is 0 the
/// intersection channel `2j` is pushed to 0, where it is 1 the extra channel
/// `2j + 1` is pushed to 0.
pub fn pairwise_loss_pixel(
    pred: &[f64],
    cond_label: &[f64],
    annotated: &ClassSet,
    cfg: &LossConfig,
) -> Result<PixelLoss> {
    let m = cond_label.len();
    if pred.len() != 2 * m {
        return Err(Error::ShapeMismatch(format!(
            "pairwise prediction has {} channels, expected {}",
            pred.len(),
            2 * m
        )));
    }
    check_probs(pred)?;
    check_binary(cond_label, "conditional label")?;
    let mut grad = vec![0.0; pred.len()];
    let mut value = 0.0;
    let mut constrained = 0;
    for (j, &yc) in cond_label.iter().enumerate() {
        if annotated.contains(j) {
            continue;
        }
        constrained += 1;
        let c = if yc == 0.0 { 2 * j } else { 2 * j + 1 };
        let (v, g) = bce(pred[c], 0.0, cfg.epsilon);
        value += v;
        grad[c] = g;
    }
    Ok(PixelLoss {
        value,
        grad,
        no_known_channels: constrained == 0,
    })
}

/// Categorical cross-entropy against a weak or one-hot target (baseline).
pub fn weak_label_ce_pixel(pred: &[f64], weak: &LabelVector, cfg: &LossConfig) -> Result<f64> {
    if pred.len() != weak.len() {
        return Err(Error::ShapeMismatch(format!(
            "pred {} vs label {}",
            pred.len(),
            weak.len()
        )));
    }
    if weak.kind() == LabelKind::CompatZero {
        return Err(Error::InvalidLabel(
            "categorical cross-entropy needs a weak or one-hot target".into(),
        ));
    }
    check_probs(pred)?;
    let total: f64 = pred.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidLabel(format!(
            "prediction sums to {total}, not a distribution"
        )));
    }
    Ok(pred
        .iter()
        .zip(weak.values())
        .filter(|(_, &y)| y > 0.0)
        .map(|(&p, &y)| -y * p.max(cfg.epsilon).ln())
        .sum())
}

/// Cross-entropy that ignores unlabeled pixels (baseline).
pub fn partial_ce_pixel(pred: &[f64], pixel_class: u8, cfg: &LossConfig) -> Result<f64> {
    check_probs(pred)?;
    if pixel_class == SENTINEL {
        return Ok(0.0);
    }
    let class = pixel_class as usize;
    if class >= pred.len() {
        return Err(Error::ClassOutOfRange {
            class,
            m: pred.len(),
        });
    }
    Ok(-pred[class].max(cfg.epsilon).ln())
}

/// Sum in a fixed pairwise tree order.
pub fn tree_sum(values: &[f64]) -> f64 {
    if values.len() <= 8 {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    tree_sum(&values[..mid]) + tree_sum(&values[mid..])
}

/// Image-level loss with its parts and gradient with respect to the probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageLoss {
    pub total: f64,
    pub cce: f64,
    pub pairwise: f64,
    /// Channel-major, same layout as [`PairwisePrediction::probs`].
    pub grad: Vec<f64>,
}

fn check_image_shapes(pred: &PairwisePrediction, target: &PairwiseTarget, cond: &ConditionalLabels) -> Result<()> {
    if pred.m() != target.m() || pred.pixels() != target.pixels() {
        return Err(Error::ShapeMismatch(format!(
            "prediction m={} {}x{} vs target m={} with {} pixels",
            pred.m(),
            pred.height(),
            pred.width(),
            target.m(),
            target.pixels()
        )));
    }
    if cond.m() != target.m() || cond.pixels() != target.pixels() {
        return Err(Error::ShapeMismatch(format!(
            "conditional labels m={} with {} pixels vs target m={} with {} pixels",
            cond.m(),
            cond.pixels(),
            target.m(),
            target.pixels()
        )));
    }
    Ok(())
}

/// Pairwise compatible loss of an image: `sum_i w_i [cce_i + pairwise_i]`.
///
/// The compatible cross-entropy runs in `2m`-channel mode against the
/// target's known channels; the pairwise term uses the conditional labels of
/// the classes the target leaves unannotated.
pub fn pairwise_compatible_loss(
    pred: &PairwisePrediction,
    target: &PairwiseTarget,
    cond: &ConditionalLabels,
    cfg: &LossConfig,
) -> Result<ImageLoss> {
    check_image_shapes(pred, target, cond)?;
    let weights = cfg.pixel_weights(target.labels())?;
    let k = pred.pixels();
    let m = pred.m();
    let eps = cfg.epsilon;
    let annotated = target.annotated();
    let mut grad = vec![0.0; pred.probs().len()];
    let mut cce_parts = vec![0.0; k];
    let mut pair_parts = vec![0.0; k];
    for i in 0..k {
        let w = weights[i];
        let mut cce = 0.0;
        for c in 0..2 * m {
            if target.is_known(c, i) {
                let (v, g) = bce(pred.get(c, i), target.value(c, i), eps);
                cce += v;
                grad[c * k + i] += w * g;
            }
        }
        let mut pair = 0.0;
        for j in 0..m {
            if annotated.contains(j) {
                continue;
            }
            let c = if cond.get(j, i) { 2 * j + 1 } else { 2 * j };
            let (v, g) = bce(pred.get(c, i), 0.0, eps);
            pair += v;
            grad[c * k + i] += w * g;
        }
        cce_parts[i] = w * cce;
        pair_parts[i] = w * pair;
    }
    let cce = tree_sum(&cce_parts);
    let pairwise = tree_sum(&pair_parts);
    Ok(ImageLoss {
        total: cce + pairwise,
        cce,
        pairwise,
        grad,
    })
}

/// Which terms make up a training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    /// Compatible cross-entropy on the pairwise output. When off, the
    /// conventional cross-entropy over labeled pixels of the assembled
    /// `m`-class output is used instead.
    pub compatible_ce: bool,
    pub pairwise: bool,
}

impl ObjectiveTerms {
    pub const FULL: ObjectiveTerms = ObjectiveTerms {
        compatible_ce: true,
        pairwise: true,
    };
}

impl Default for ObjectiveTerms {
    fn default() -> Self {
        Self::FULL
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ObjectiveValue {
    /// Compatible cross-entropy, or the partial cross-entropy when that term is off.
    pub cce: f64,
    pub pairwise: f64,
    pub total: f64,
}

/// Training objective of one image and its gradient with respect to the logits.
///
/// The value is the clamped loss; the gradient is taken in logit space
/// (`w (p - y)` per binary term), which equals the chain rule through the
/// logistic wherever the clamp is inactive and stays informative where a
/// channel has saturated.
pub fn objective_logit_grad(
    pred: &PairwisePrediction,
    target: &PairwiseTarget,
    cond: &ConditionalLabels,
    cfg: &LossConfig,
    terms: ObjectiveTerms,
    background: BackgroundRule,
) -> Result<(ObjectiveValue, Vec<f64>)> {
    check_image_shapes(pred, target, cond)?;
    let weights = cfg.pixel_weights(target.labels())?;
    let k = pred.pixels();
    let m = pred.m();
    let eps = cfg.epsilon;
    let annotated = target.annotated();
    let mut grad = vec![0.0; pred.probs().len()];
    let mut cce_parts = vec![0.0; k];
    let mut pair_parts = vec![0.0; k];
    // probability-space gradient of the partial cross-entropy, chained below
    let mut prob_grad = if terms.compatible_ce {
        Vec::new()
    } else {
        vec![0.0; pred.probs().len()]
    };
    let mut scores = vec![0.0; m];
    let mut d_scores = vec![0.0; m];
    for i in 0..k {
        let w = weights[i];
        if terms.compatible_ce {
            let mut cce = 0.0;
            for c in 0..2 * m {
                if target.is_known(c, i) {
                    let p = pred.get(c, i);
                    let y = target.value(c, i);
                    cce += bce(p, y, eps).0;
                    grad[c * k + i] += w * (p - y);
                }
            }
            cce_parts[i] = w * cce;
        } else {
            let label = target.labels()[i];
            if label != SENTINEL {
                let class = label as usize;
                assemble::pixel_scores(pred, i, background, &mut scores);
                let total: f64 = scores.iter().sum::<f64>().max(eps);
                let q = scores[class] / total;
                cce_parts[i] = -w * q.max(eps).ln();
                if q > eps && scores[class] > 0.0 {
                    for (kk, d) in d_scores.iter_mut().enumerate() {
                        let own = if kk == class { 1.0 / scores[class] } else { 0.0 };
                        *d = w * (1.0 / total - own);
                    }
                    assemble::pixel_scores_backward(pred, i, background, &d_scores, &mut prob_grad);
                }
            }
        }
        if terms.pairwise {
            let mut pair = 0.0;
            for j in 0..m {
                if annotated.contains(j) {
                    continue;
                }
                let c = if cond.get(j, i) { 2 * j + 1 } else { 2 * j };
                let p = pred.get(c, i);
                pair += bce(p, 0.0, eps).0;
                grad[c * k + i] += w * p;
            }
            pair_parts[i] = w * pair;
        }
    }
    if !terms.compatible_ce {
        for (g, (&pg, &p)) in grad.iter_mut().zip(prob_grad.iter().zip(pred.probs())) {
            *g += pg * p * (1.0 - p);
        }
    }
    let cce = tree_sum(&cce_parts);
    let pairwise = tree_sum(&pair_parts);
    let value = ObjectiveValue {
        cce,
        pairwise,
        total: cce + pairwise,
    };
    if !value.total.is_finite() {
        return Err(Error::InvalidProbability {
            index: 0,
            value: value.total,
        });
    }
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> LossConfig {
        LossConfig::default()
    }

    #[test]
    fn compatible_ce_examples() {
        let all = ChannelMask::all(3);
        let l = compatible_ce_pixel(&[0.0, 1.0, 0.0], &[0.0, 1.0, 0.0], &all, &cfg()).unwrap();
        assert!(l.value < 1e-6);

        let known = ChannelMask::from_classes(3, &ClassSet::single(0));
        let l = compatible_ce_pixel(&[0.5, 0.9, 0.1], &[0.0; 3], &known, &cfg()).unwrap();
        assert!((l.value - 0.5f64.ln().abs()).abs() < 1e-12);
        assert_eq!(l.grad[1], 0.0);

        let l = compatible_ce_pixel(&[0.8, 0.1, 0.2], &[1.0, 0.0, 0.0], &all, &cfg()).unwrap();
        assert!((l.value + (0.8f64.ln() + 0.9f64.ln() + 0.8f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn compatible_ce_errors_and_empty_known() {
        let all = ChannelMask::all(2);
        assert!(compatible_ce_pixel(&[f64::NAN, 0.5], &[0.0, 1.0], &all, &cfg()).is_err());
        assert!(compatible_ce_pixel(&[1.5, 0.5], &[0.0, 1.0], &all, &cfg()).is_err());
        let l = compatible_ce_pixel(&[0.3, 0.5], &[0.0, 0.0], &ChannelMask::none(2), &cfg()).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(l.no_known_channels);
    }

    #[test]
    fn pairwise_pixel_examples() {
        // m = 2, class 0 annotated, class 1 constrained
        let ann = ClassSet::single(0);
        let l = pairwise_loss_pixel(&[0.3, 0.3, 0.0, 0.7], &[0.0, 0.0], &ann, &cfg()).unwrap();
        assert!(l.value < 1e-6);
        let l = pairwise_loss_pixel(&[0.3, 0.3, 0.9, 0.5], &[0.0, 1.0], &ann, &cfg()).unwrap();
        assert!((l.value - 2f64.ln()).abs() < 1e-12);
        let l = pairwise_loss_pixel(&[0.3, 0.3, 0.2, 0.9], &[0.0, 0.0], &ann, &cfg()).unwrap();
        assert!((l.value + 0.8f64.ln()).abs() < 1e-12);
        assert!(pairwise_loss_pixel(&[0.3; 4], &[0.0, 0.5], &ann, &cfg()).is_err());
    }

    #[test]
    fn baselines() {
        let weak = LabelVector::from_values(vec![0.0, 0.5, 0.5], LabelKind::Weak).unwrap();
        let v = weak_label_ce_pixel(&[0.0, 0.5, 0.5], &weak, &cfg()).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-12);
        let v = weak_label_ce_pixel(&[0.0, 0.0, 1.0], &weak, &cfg()).unwrap();
        assert!((v - 0.5 * (1e7f64).ln()).abs() < 1e-9);
        assert!(weak_label_ce_pixel(&[0.2, 0.2, 0.2], &weak, &cfg()).is_err());
        let hot = LabelVector::one_hot(1, 3);
        assert_eq!(weak_label_ce_pixel(&[0.0, 1.0, 0.0], &hot, &cfg()).unwrap(), 0.0);

        assert_eq!(partial_ce_pixel(&[0.2, 0.3, 0.5], SENTINEL, &cfg()).unwrap(), 0.0);
        assert_eq!(partial_ce_pixel(&[0.0, 0.0, 1.0], 2, &cfg()).unwrap(), 0.0);
        let v = partial_ce_pixel(&[0.5, 0.25, 0.25], 1, &cfg()).unwrap();
        assert!((v - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn weighting_modes() {
        let labels = [1u8, 1, 1, SENTINEL];
        let uni = LossConfig::default().pixel_weights(&labels).unwrap();
        assert_eq!(uni, vec![0.25; 4]);
        let inv = LossConfig {
            weighting: PixelWeighting::InverseClassFrequency,
            ..LossConfig::default()
        }
        .pixel_weights(&labels)
        .unwrap();
        assert!((inv.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((inv[3] - 0.5).abs() < 1e-12);
        let bad = LossConfig {
            epsilon: 0.1,
            ..LossConfig::default()
        };
        assert!(bad.validate().is_err());
        let zero = LossConfig {
            weighting: PixelWeighting::Explicit(vec![0.0; 4]),
            ..LossConfig::default()
        };
        assert!(zero.pixel_weights(&labels).is_err());
    }

    #[test]
    fn tree_sum_matches_plain_sum() {
        let v: Vec<f64> = (0..1000).map(|i| i as f64 * 0.5).collect();
        assert_eq!(tree_sum(&v), v.iter().sum::<f64>());
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }
}
