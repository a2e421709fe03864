//! Conditional priors, pairwise supervision targets and the primal/dual swap.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::label_model::{ClassSet, PartialLabelMap, SENTINEL};
use crate::losses::PairwisePrediction;
use crate::network::assemble;
use crate::plane::Plane;

/// Threshold turning soft conditional masks (injected pseudo-labels) into labels.
pub const MASK_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairingConfig {
    /// One conditional slot per listed class, in this order.
    pub conditional_classes: Vec<usize>,
    /// Keep the target image out of its own conditional set.
    pub exclude_target: bool,
}

impl PairingConfig {
    /// Slots for every foreground class, target excluded.
    pub fn foreground(m: usize) -> Self {
        Self {
            conditional_classes: (1..m).collect(),
            exclude_target: true,
        }
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        if self.conditional_classes.is_empty() {
            return Err(Error::Config("conditional class list is empty".into()));
        }
        let set: ClassSet = self.conditional_classes.iter().copied().collect();
        if set.len() != self.conditional_classes.len() {
            return Err(Error::Config(format!(
                "duplicate conditional classes in {:?}",
                self.conditional_classes
            )));
        }
        if let Some(&c) = self.conditional_classes.iter().find(|&&c| c >= m) {
            return Err(Error::ClassOutOfRange { class: c, m });
        }
        Ok(())
    }
}

/// Where a conditional pair came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PairSource {
    /// An annotated dataset sample.
    Sample(usize),
    /// A prediction made on the target image with this sample id.
    Prediction(Option<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalPair {
    pub class_id: usize,
    pub image: Plane,
    /// Binary annotation of `class_id`, or soft probabilities for injected predictions.
    pub mask: Plane,
    pub source: PairSource,
}

/// One (image, single-class mask) pair per conditional class, in slot order.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalSet {
    slots: Vec<ConditionalPair>,
}

impl ConditionalSet {
    pub fn new(slots: Vec<ConditionalPair>) -> Result<Self> {
        if let Some(first) = slots.first() {
            let shape = first.image.shape();
            for pair in &slots {
                if pair.image.shape() != shape || pair.mask.shape() != shape {
                    return Err(Error::ShapeMismatch(format!(
                        "conditional slot for class {} is not {}x{}",
                        pair.class_id, shape.0, shape.1
                    )));
                }
            }
        }
        let classes: ClassSet = slots.iter().map(|p| p.class_id).collect();
        if classes.len() != slots.len() {
            return Err(Error::Config("two conditional slots share a class".into()));
        }
        Ok(Self { slots })
    }

    pub fn slots(&self) -> &[ConditionalPair] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn classes(&self) -> Vec<usize> {
        self.slots.iter().map(|p| p.class_id).collect()
    }

    pub fn slot_of_class(&self, class: usize) -> Option<usize> {
        self.slots.iter().position(|p| p.class_id == class)
    }

    pub fn pair_for_class(&self, class: usize) -> Option<&ConditionalPair> {
        self.slots.iter().find(|p| p.class_id == class)
    }

    /// The same slots with every image and mask set to zero.
    pub fn zeroed(&self) -> Self {
        Self {
            slots: self
                .slots
                .iter()
                .map(|p| ConditionalPair {
                    class_id: p.class_id,
                    image: Plane::zeros(p.image.height(), p.image.width()),
                    mask: Plane::zeros(p.mask.height(), p.mask.width()),
                    source: p.source,
                })
                .collect(),
        }
    }
}

/// Binary conditional labels `y^C` per class; classes without a slot are all zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalLabels {
    m: usize,
    pixels: usize,
    masks: Vec<Option<Vec<bool>>>,
}

impl ConditionalLabels {
    pub fn zeros(m: usize, pixels: usize) -> Self {
        Self {
            m,
            pixels,
            masks: vec![None; m],
        }
    }

    pub fn from_masks(m: usize, pixels: usize, masks: Vec<Option<Vec<bool>>>) -> Result<Self> {
        if masks.len() != m {
            return Err(Error::ShapeMismatch(format!("{} masks for {m} classes", masks.len())));
        }
        if masks.iter().flatten().any(|mk| mk.len() != pixels) {
            return Err(Error::ShapeMismatch(format!("conditional mask is not {pixels} pixels")));
        }
        Ok(Self { m, pixels, masks })
    }

    /// Binarizes the slot masks at [`MASK_THRESHOLD`].
    pub fn from_set(cond: &ConditionalSet, m: usize, pixels: usize) -> Result<Self> {
        let mut masks = vec![None; m];
        for pair in cond.slots() {
            if pair.class_id >= m {
                return Err(Error::ClassOutOfRange {
                    class: pair.class_id,
                    m,
                });
            }
            if pair.mask.len() != pixels {
                return Err(Error::ShapeMismatch(format!(
                    "conditional mask of class {} has {} pixels, expected {pixels}",
                    pair.class_id,
                    pair.mask.len()
                )));
            }
            masks[pair.class_id] = Some(pair.mask.binarize(MASK_THRESHOLD));
        }
        Ok(Self { m, pixels, masks })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn pixels(&self) -> usize {
        self.pixels
    }

    #[inline]
    pub fn get(&self, class: usize, pixel: usize) -> bool {
        self.masks[class].as_ref().is_some_and(|mk| mk[pixel])
    }

    pub fn mask(&self, class: usize) -> Option<&[bool]> {
        self.masks[class].as_deref()
    }

    /// The `m`-vector `y^C` of one pixel.
    pub fn pixel(&self, pixel: usize) -> Vec<f64> {
        (0..self.m)
            .map(|j| if self.get(j, pixel) { 1.0 } else { 0.0 })
            .collect()
    }
}

/// Intersection/extra decomposition of a partially labeled target against conditional masks.
#[derive(Debug, Clone, PartialEq)]
pub struct PairwiseTarget {
    m: usize,
    height: usize,
    width: usize,
    annotated: ClassSet,
    labels: Vec<u8>,
    inter: Vec<Vec<bool>>,
    extra: Vec<Vec<bool>>,
    /// Channel-major, `2m * pixels`.
    known: Vec<bool>,
}

impl PairwiseTarget {
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

    pub fn annotated(&self) -> &ClassSet {
        &self.annotated
    }

    /// Label values of the target map.
    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn inter(&self, class: usize) -> &[bool] {
        &self.inter[class]
    }

    pub fn extra(&self, class: usize) -> &[bool] {
        &self.extra[class]
    }

    #[inline]
    pub fn is_known(&self, channel: usize, pixel: usize) -> bool {
        self.known[channel * self.pixels() + pixel]
    }

    /// Target value of a channel (meaningful where the channel is known).
    #[inline]
    pub fn value(&self, channel: usize, pixel: usize) -> f64 {
        let class = channel / 2;
        let on = if channel.is_multiple_of(2) {
            self.inter[class][pixel]
        } else {
            self.extra[class][pixel]
        };
        if on {
            1.0
        } else {
            0.0
        }
    }

    pub fn known_channel(&self, channel: usize) -> &[bool] {
        let k = self.pixels();
        &self.known[channel * k..(channel + 1) * k]
    }

    /// Target and known flags of every channel at one pixel.
    pub fn pixel(&self, pixel: usize) -> (Vec<f64>, Vec<bool>) {
        (0..2 * self.m)
            .map(|c| (self.value(c, pixel), self.is_known(c, pixel)))
            .unzip()
    }
}

/// Splits every annotated class `k` of the target into `R^T_k AND R^C_k` and `R^T_k AND NOT R^C_k`.
///
/// Labeled pixels determine all `2m` channels; unlabeled pixels only the
/// channels of annotated classes (where both targets are 0).
pub fn build_pairwise_target(target: &PartialLabelMap, cond: &ConditionalLabels) -> Result<PairwiseTarget> {
    let m = cond.m();
    let k = target.len();
    if cond.pixels() != k {
        return Err(Error::ShapeMismatch(format!(
            "target has {k} pixels, conditional labels {}",
            cond.pixels()
        )));
    }
    if let Some(c) = target.annotated().max().filter(|&c| c >= m) {
        return Err(Error::ClassOutOfRange { class: c, m });
    }
    let mut inter = vec![vec![false; k]; m];
    let mut extra = vec![vec![false; k]; m];
    let mut known = vec![false; 2 * m * k];
    for class in target.annotated().iter() {
        for c in [2 * class, 2 * class + 1] {
            known[c * k..(c + 1) * k].iter_mut().for_each(|v| *v = true);
        }
    }
    for (i, &label) in target.labels().iter().enumerate() {
        if label == SENTINEL {
            continue;
        }
        let class = label as usize;
        if cond.get(class, i) {
            inter[class][i] = true;
        } else {
            extra[class][i] = true;
        }
        for c in 0..2 * m {
            known[c * k + i] = true;
        }
    }
    Ok(PairwiseTarget {
        m,
        height: target.height(),
        width: target.width(),
        annotated: target.annotated().clone(),
        labels: target.labels().to_vec(),
        inter,
        extra,
        known,
    })
}

/// Draws one conditional pair per configured class from the training split.
///
/// Slot `j` is a uniformly chosen training sample annotated with class `j`,
/// paired with its binary class-`j` mask.
pub fn sample_conditional_set<R: Rng + ?Sized>(
    target_id: Option<usize>,
    dataset: &Dataset,
    rng: &mut R,
    cfg: &PairingConfig,
) -> Result<ConditionalSet> {
    let space = dataset.class_space();
    cfg.validate(space.m())?;
    let mut slots = Vec::with_capacity(cfg.conditional_classes.len());
    for &class in &cfg.conditional_classes {
        let pool = dataset.pool(class);
        let excluded = match target_id {
            Some(t) if cfg.exclude_target && pool.contains(&t) => 1,
            _ => 0,
        };
        let available = pool.len() - excluded;
        if available == 0 {
            return Err(Error::MissingConditionalClass {
                class,
                name: space.name(class).to_string(),
            });
        }
        let mut pick = rng.random_range(0..available);
        if excluded == 1 {
            let t = target_id.expect("exclusion implies a target");
            let pos = pool.iter().position(|&s| s == t).expect("target is in pool");
            if pick >= pos {
                pick += 1;
            }
        }
        let sample = dataset.sample(pool[pick]);
        let (h, w) = sample.image.shape();
        slots.push(ConditionalPair {
            class_id: class,
            image: sample.image.clone(),
            mask: Plane::from_mask(h, w, &sample.labels.class_mask(class))?,
            source: PairSource::Sample(sample.id),
        });
    }
    ConditionalSet::new(slots)
}

/// A target image with its partial labels and conditional set.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalSample {
    pub target_id: Option<usize>,
    pub image: Plane,
    pub labels: PartialLabelMap,
    pub cond: ConditionalSet,
}

/// How the swapped conditional slot is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Swap {
    Class(usize),
    Random,
}

/// Primal variable `u` and dual variable `v` built by swapping one conditional slot.
#[derive(Debug, Clone, PartialEq)]
pub struct DualSample {
    pub primal: ConditionalSample,
    pub dual: ConditionalSample,
    /// Class of the swapped slot.
    pub swap_class: usize,
    pub swap_slot: usize,
    /// Primal prediction of the swapped class on the primal target image.
    pub pseudo_label: Plane,
}

/// Builds the dual variable of `primal` from PrimNet's prediction on its target image.
///
/// The conditional pair of the swapped class becomes the dual target; the
/// primal target image with the predicted class map (soft probabilities)
/// takes its slot in the dual conditional set.
pub fn make_dual_sample<R: Rng + ?Sized>(
    primal: &ConditionalSample,
    prim_prediction: &PairwisePrediction,
    swap: Swap,
    rng: &mut R,
) -> Result<DualSample> {
    let slots = primal.cond.slots();
    if slots.is_empty() {
        return Err(Error::Config("cannot swap from an empty conditional set".into()));
    }
    let slot = match swap {
        Swap::Random => rng.random_range(0..slots.len()),
        Swap::Class(class) => primal.cond.slot_of_class(class).ok_or_else(|| {
            Error::Config(format!(
                "swap class {class} has no conditional slot (slots {:?})",
                primal.cond.classes()
            ))
        })?,
    };
    let (h, w) = primal.image.shape();
    if prim_prediction.height() != h || prim_prediction.width() != w {
        return Err(Error::ShapeMismatch(format!(
            "prediction is {}x{}, target image {h}x{w}",
            prim_prediction.height(),
            prim_prediction.width()
        )));
    }
    let swapped = &slots[slot];
    let class = swapped.class_id;
    if class >= prim_prediction.m() {
        return Err(Error::ClassOutOfRange {
            class,
            m: prim_prediction.m(),
        });
    }
    let pseudo_label = Plane::new(h, w, assemble::class_probability(prim_prediction, class))?;

    let dual_labels = PartialLabelMap::from_class_mask(h, w, &swapped.mask.binarize(MASK_THRESHOLD), class)?;
    let mut dual_slots = slots.to_vec();
    dual_slots[slot] = ConditionalPair {
        class_id: class,
        image: primal.image.clone(),
        mask: pseudo_label.clone(),
        source: PairSource::Prediction(primal.target_id),
    };
    let dual_id = match swapped.source {
        PairSource::Sample(id) => Some(id),
        PairSource::Prediction(_) => None,
    };
    Ok(DualSample {
        primal: primal.clone(),
        dual: ConditionalSample {
            target_id: dual_id,
            image: swapped.image.clone(),
            labels: dual_labels,
            cond: ConditionalSet::new(dual_slots)?,
        },
        swap_class: class,
        swap_slot: slot,
        pseudo_label,
    })
}

/// Treats a fully annotated map as `m` one-label maps, one per class.
pub fn split_full_labels(full: &PartialLabelMap, m: usize) -> Result<Vec<PartialLabelMap>> {
    if !full.is_fully_annotated(m) {
        return Err(Error::InvalidLabel(format!(
            "label map is not fully annotated (annotated {})",
            full.annotated()
        )));
    }
    (0..m)
        .map(|class| PartialLabelMap::from_class_mask(full.height(), full.width(), &full.class_mask(class), class))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn plane(v: f64) -> Plane {
        Plane::new(1, 4, vec![v; 4]).unwrap()
    }

    #[test]
    fn pairwise_target_set_operations() {
        // pixels p0..p4; R^T_1 = {p1,p2,p3}, R^C_1 = {p2,p3,p4}
        let target = PartialLabelMap::new(1, 5, vec![SENTINEL, 1, 1, 1, SENTINEL], ClassSet::single(1)).unwrap();
        let cond = ConditionalLabels::from_masks(
            2,
            5,
            vec![None, Some(vec![false, false, true, true, true])],
        )
        .unwrap();
        let t = build_pairwise_target(&target, &cond).unwrap();
        assert_eq!(t.inter(1), &[false, false, true, true, false]);
        assert_eq!(t.extra(1), &[false, true, false, false, false]);
        // class-1 channels known everywhere, class-0 channels only on labeled pixels
        assert!(t.known_channel(2).iter().all(|&k| k));
        assert_eq!(t.known_channel(0), &[false, true, true, true, false]);
    }

    #[test]
    fn identical_and_disjoint_masks() {
        let target = PartialLabelMap::new(1, 4, vec![1, 1, SENTINEL, SENTINEL], ClassSet::single(1)).unwrap();
        let same = ConditionalLabels::from_masks(2, 4, vec![None, Some(vec![true, true, false, false])]).unwrap();
        let t = build_pairwise_target(&target, &same).unwrap();
        assert!(t.extra(1).iter().all(|&e| !e));
        let disjoint = ConditionalLabels::from_masks(2, 4, vec![None, Some(vec![false, false, true, true])]).unwrap();
        let t = build_pairwise_target(&target, &disjoint).unwrap();
        assert!(t.inter(1).iter().all(|&e| !e));
        assert_eq!(t.extra(1), &[true, true, false, false]);
    }

    fn primal_with_three_slots() -> ConditionalSample {
        let slots = (0..3)
            .map(|j| ConditionalPair {
                class_id: j,
                image: plane(j as f64 + 1.0),
                mask: Plane::new(1, 4, vec![1.0, 0.0, 0.0, 0.0]).unwrap(),
                source: PairSource::Sample(10 + j),
            })
            .collect();
        ConditionalSample {
            target_id: Some(0),
            image: plane(0.0),
            labels: PartialLabelMap::new(1, 4, vec![0, SENTINEL, SENTINEL, SENTINEL], ClassSet::single(0)).unwrap(),
            cond: ConditionalSet::new(slots).unwrap(),
        }
    }

    #[test]
    fn dual_swap_places_pseudo_label_in_slot() {
        let primal = primal_with_three_slots();
        let probs: Vec<f64> = (0..24).map(|i| (i % 5) as f64 * 0.1).collect();
        let pred = PairwisePrediction::new(3, 1, 4, probs).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = make_dual_sample(&primal, &pred, Swap::Class(1), &mut rng).unwrap();
        assert_eq!(d.swap_slot, 1);
        assert_eq!(d.dual.image, plane(2.0));
        assert_eq!(d.dual.target_id, Some(11));
        assert_eq!(d.dual.labels.labels(), &[1, SENTINEL, SENTINEL, SENTINEL]);
        let slots = d.dual.cond.slots();
        assert_eq!(slots[0].image, plane(1.0));
        assert_eq!(slots[1].image, plane(0.0));
        assert_eq!(slots[2].image, plane(3.0));
        assert_eq!(slots[1].mask, d.pseudo_label);
        let expected: Vec<f64> = (0..4)
            .map(|i| (pred.get(2, i) + pred.get(3, i)).min(1.0))
            .collect();
        assert_eq!(d.pseudo_label.data(), expected.as_slice());

        // second swap on the same class brings the original image back as dual target slot
        let pred2 = PairwisePrediction::new(3, 1, 4, vec![0.2; 24]).unwrap();
        let back = make_dual_sample(&d.dual, &pred2, Swap::Class(1), &mut rng).unwrap();
        assert_eq!(back.dual.cond.slots()[1].image, plane(2.0));
        assert_eq!(back.dual.image, plane(0.0));
    }

    #[test]
    fn dual_swap_rejects_unknown_class() {
        let primal = primal_with_three_slots();
        let pred = PairwisePrediction::new(3, 1, 4, vec![0.1; 24]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(make_dual_sample(&primal, &pred, Swap::Class(5), &mut rng).is_err());
    }

    #[test]
    fn random_swap_is_seeded() {
        let primal = primal_with_three_slots();
        let pred = PairwisePrediction::new(3, 1, 4, vec![0.1; 24]).unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20)
                .map(|_| make_dual_sample(&primal, &pred, Swap::Random, &mut rng).unwrap().swap_slot)
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(3), draw(3));
    }

    #[test]
    fn split_full_labels_partitions_and_reassembles() {
        let full = PartialLabelMap::full(2, 3, vec![0, 1, 2, 3, 3, 0], 4).unwrap();
        let parts = split_full_labels(&full, 4).unwrap();
        assert_eq!(parts.len(), 4);
        let mut rebuilt = vec![SENTINEL; 6];
        for (k, part) in parts.iter().enumerate() {
            assert_eq!(part.annotated(), &ClassSet::single(k));
            for (i, &v) in part.labels().iter().enumerate() {
                if v != SENTINEL {
                    assert_eq!(rebuilt[i], SENTINEL, "labeled sets overlap");
                    rebuilt[i] = v;
                }
            }
        }
        assert_eq!(rebuilt, full.labels());

        let partial = PartialLabelMap::new(1, 2, vec![1, SENTINEL], ClassSet::single(1)).unwrap();
        assert!(split_full_labels(&partial, 4).is_err());
    }
}
