//! Label representations and the partial-annotation data model.
//!
//! A partially annotated image carries a per-pixel class index for the pixels
//! of its annotated classes and [`SENTINEL`] everywhere else. Per pixel, the
//! label can be turned into one of three vectors:
//!
//! * a one-hot vector for labeled pixels,
//! * the weak form, spreading mass `1/(m-q)` over the unannotated classes,
//! * the all-zero compatible form, constraining only the annotated channels.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reserved label value for unlabeled pixels.
pub const SENTINEL: u8 = 255;

/// The label classes of a task. Background is class 0 and is an ordinary class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSpace {
    names: Vec<String>,
}

impl ClassSpace {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.len() < 2 {
            return Err(Error::InvalidClassSpace(format!(
                "need at least 2 classes, got {}",
                names.len()
            )));
        }
        if names.len() > SENTINEL as usize {
            return Err(Error::InvalidClassSpace(format!(
                "at most {} classes fit below the sentinel, got {}",
                SENTINEL,
                names.len()
            )));
        }
        let unique: BTreeSet<&str> = names.iter().map(String::as_str).collect();
        if unique.len() != names.len() {
            return Err(Error::InvalidClassSpace(format!(
                "duplicate class names in {names:?}"
            )));
        }
        Ok(Self { names })
    }

    /// Class space with generic names `class0..class{m-1}`.
    pub fn with_classes(m: usize) -> Result<Self> {
        Self::new((0..m).map(|k| format!("class{k}")))
    }

    /// Background plus the three cardiac-like structures used by the phantoms.
    pub fn cardiac() -> Self {
        Self::new(["background", "lv", "myo", "rv"]).expect("static class space is valid")
    }

    pub fn m(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, class: usize) -> &str {
        &self.names[class]
    }

    pub fn all(&self) -> ClassSet {
        ClassSet::from_iter(0..self.m())
    }

    /// Every class except background.
    pub fn foreground(&self) -> ClassSet {
        ClassSet::from_iter(1..self.m())
    }

    pub fn check(&self, class: usize) -> Result<()> {
        if class < self.m() {
            Ok(())
        } else {
            Err(Error::ClassOutOfRange {
                class,
                m: self.m(),
            })
        }
    }
}

/// An ordered set of class indices (the annotated set of an image, for instance).
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassSet(BTreeSet<usize>);

impl ClassSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn single(class: usize) -> Self {
        Self::from_iter([class])
    }

    pub fn contains(&self, class: usize) -> bool {
        self.0.contains(&class)
    }

    pub fn insert(&mut self, class: usize) -> bool {
        self.0.insert(class)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn to_vec(&self) -> Vec<usize> {
        self.iter().collect()
    }

    pub fn is_subset(&self, other: &ClassSet) -> bool {
        self.0.is_subset(&other.0)
    }

    pub fn max(&self) -> Option<usize> {
        self.0.last().copied()
    }
}

impl FromIterator<usize> for ClassSet {
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

impl fmt::Display for ClassSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.to_vec())
    }
}

/// Per-channel flags marking which channels of a label vector carry a constraint.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ChannelMask(Vec<bool>);

impl ChannelMask {
    pub fn none(n: usize) -> Self {
        Self(vec![false; n])
    }

    pub fn all(n: usize) -> Self {
        Self(vec![true; n])
    }

    pub fn from_classes(n: usize, classes: &ClassSet) -> Self {
        Self((0..n).map(|c| classes.contains(c)).collect())
    }

    pub fn from_bools(flags: Vec<bool>) -> Self {
        Self(flags)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_known(&self, channel: usize) -> bool {
        self.0[channel]
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&k| k).count()
    }

    pub fn known(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, &k)| k).map(|(c, _)| c)
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    OneHot,
    Weak,
    CompatZero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelVector {
    values: Vec<f64>,
    kind: LabelKind,
}

impl LabelVector {
    pub fn one_hot(class: usize, m: usize) -> Self {
        let mut values = vec![0.0; m];
        values[class] = 1.0;
        Self {
            values,
            kind: LabelKind::OneHot,
        }
    }

    pub fn compat_zero(m: usize) -> Self {
        Self {
            values: vec![0.0; m],
            kind: LabelKind::CompatZero,
        }
    }

    /// Builds a vector from raw values, checking them against the invariant of `kind`.
    pub fn from_values(values: Vec<f64>, kind: LabelKind) -> Result<Self> {
        let ok = match kind {
            LabelKind::OneHot => {
                values.iter().filter(|&&v| v == 1.0).count() == 1
                    && values.iter().all(|&v| v == 0.0 || v == 1.0)
            }
            LabelKind::CompatZero => values.iter().all(|&v| v == 0.0),
            LabelKind::Weak => {
                let nonzero: Vec<f64> = values.iter().copied().filter(|&v| v != 0.0).collect();
                !nonzero.is_empty()
                    && nonzero.iter().all(|&v| v == nonzero[0])
                    && (nonzero.iter().sum::<f64>() - 1.0).abs() < 1e-12
            }
        };
        if !ok {
            return Err(Error::InvalidLabel(format!(
                "{values:?} is not a valid {kind:?} vector"
            )));
        }
        Ok(Self { values, kind })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn kind(&self) -> LabelKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Index of the hot entry for one-hot vectors.
    pub fn hot_class(&self) -> Option<usize> {
        match self.kind {
            LabelKind::OneHot => self.values.iter().position(|&v| v == 1.0),
            _ => None,
        }
    }
}

fn check_annotated(annotated: &ClassSet, space: &ClassSpace) -> Result<()> {
    for class in annotated.iter() {
        space.check(class)?;
    }
    Ok(())
}

/// Weak-form label of an unlabeled pixel: `1/(m-q)` on every unannotated class.
///
/// `gt_class` must be one of the unannotated classes; labeled pixels use the
/// one-hot form instead.
pub fn to_weak_label(gt_class: usize, annotated: &ClassSet, space: &ClassSpace) -> Result<LabelVector> {
    space.check(gt_class)?;
    check_annotated(annotated, space)?;
    let m = space.m();
    if annotated.contains(gt_class) {
        return Err(Error::InvalidLabel(format!(
            "class {gt_class} is annotated; the pixel takes a one-hot label"
        )));
    }
    if annotated.len() >= m {
        return Err(Error::InvalidLabel(
            "every class is annotated; no weak form exists".into(),
        ));
    }
    let share = 1.0 / (m - annotated.len()) as f64;
    let values = (0..m)
        .map(|c| if annotated.contains(c) { 0.0 } else { share })
        .collect();
    Ok(LabelVector {
        values,
        kind: LabelKind::Weak,
    })
}

/// Compatible label of a pixel together with the channels it constrains.
///
/// Labeled pixels get their one-hot vector with every channel known; unlabeled
/// pixels get the zero vector with only the annotated channels known.
pub fn to_compat_label(
    pixel: u8,
    annotated: &ClassSet,
    space: &ClassSpace,
) -> Result<(LabelVector, ChannelMask)> {
    check_annotated(annotated, space)?;
    let m = space.m();
    if pixel == SENTINEL {
        return Ok((
            LabelVector::compat_zero(m),
            ChannelMask::from_classes(m, annotated),
        ));
    }
    let class = pixel as usize;
    space.check(class)?;
    if !annotated.contains(class) {
        return Err(Error::CorruptAnnotation {
            class: pixel,
            annotated: annotated.to_vec(),
        });
    }
    Ok((LabelVector::one_hot(class, m), ChannelMask::all(m)))
}

/// Per-pixel class indices of one image, with [`SENTINEL`] on unlabeled pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartialLabelMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
    annotated: ClassSet,
}

impl PartialLabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>, annotated: ClassSet) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::ShapeMismatch(format!(
                "label map must be non-empty, got {height}x{width}"
            )));
        }
        if labels.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for a {height}x{width} map",
                labels.len()
            )));
        }
        if annotated.is_empty() {
            return Err(Error::InvalidLabel("annotated class set is empty".into()));
        }
        if let Some(&bad) = labels
            .iter()
            .find(|&&v| v != SENTINEL && !annotated.contains(v as usize))
        {
            return Err(Error::CorruptAnnotation {
                class: bad,
                annotated: annotated.to_vec(),
            });
        }
        Ok(Self {
            height,
            width,
            labels,
            annotated,
        })
    }

    /// A fully annotated map; every value must be a class below `m`.
    pub fn full(height: usize, width: usize, labels: Vec<u8>, m: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&v| v as usize >= m) {
            return Err(Error::ClassOutOfRange {
                class: bad as usize,
                m,
            });
        }
        Self::new(height, width, labels, ClassSet::from_iter(0..m))
    }

    /// Map annotated with a single class from a binary mask.
    pub fn from_class_mask(height: usize, width: usize, mask: &[bool], class: usize) -> Result<Self> {
        let labels = mask
            .iter()
            .map(|&on| if on { class as u8 } else { SENTINEL })
            .collect();
        Self::new(height, width, labels, ClassSet::single(class))
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn annotated(&self) -> &ClassSet {
        &self.annotated
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.width + col]
    }

    pub fn is_labeled(&self, index: usize) -> bool {
        self.labels[index] != SENTINEL
    }

    pub fn is_fully_annotated(&self, m: usize) -> bool {
        self.annotated.len() == m && self.labels.iter().all(|&v| v != SENTINEL)
    }

    /// Binary membership mask of `class` (all false when the class is unannotated).
    pub fn class_mask(&self, class: usize) -> Vec<bool> {
        self.labels.iter().map(|&v| v as usize == class && v != SENTINEL).collect()
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|&&v| v != SENTINEL).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space(m: usize) -> ClassSpace {
        ClassSpace::with_classes(m).unwrap()
    }

    #[test]
    fn class_space_limits() {
        assert!(ClassSpace::with_classes(1).is_err());
        assert!(ClassSpace::with_classes(255).is_ok());
        assert!(ClassSpace::with_classes(256).is_err());
        assert!(ClassSpace::new(["a", "a"]).is_err());
        assert_eq!(ClassSpace::cardiac().m(), 4);
    }

    #[test]
    fn weak_label_examples() {
        let w = to_weak_label(0, &ClassSet::single(1), &space(4)).unwrap();
        let third = 1.0 / 3.0;
        assert_eq!(w.values(), &[third, 0.0, third, third]);
        assert_eq!(w.kind(), LabelKind::Weak);

        let w = to_weak_label(1, &ClassSet::single(0), &space(2)).unwrap();
        assert_eq!(w.values(), &[0.0, 1.0]);

        let w = to_weak_label(2, &ClassSet::from_iter([0, 1]), &space(3)).unwrap();
        assert_eq!(w.values(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn weak_label_rejects_annotated_gt_and_full_set() {
        assert!(to_weak_label(1, &ClassSet::single(1), &space(3)).is_err());
        assert!(to_weak_label(0, &ClassSet::from_iter(0..3), &space(3)).is_err());
        assert!(to_weak_label(5, &ClassSet::single(1), &space(3)).is_err());
    }

    #[test]
    fn compat_label_examples() {
        let (v, known) = to_compat_label(1, &ClassSet::single(1), &space(3)).unwrap();
        assert_eq!(v.values(), &[0.0, 1.0, 0.0]);
        assert_eq!(known, ChannelMask::all(3));

        let (v, known) = to_compat_label(SENTINEL, &ClassSet::single(1), &space(3)).unwrap();
        assert_eq!(v.values(), &[0.0, 0.0, 0.0]);
        assert_eq!(known.known().collect::<Vec<_>>(), vec![1]);

        let ann = ClassSet::from_iter([0, 2]);
        let (v, known) = to_compat_label(SENTINEL, &ann, &space(4)).unwrap();
        assert_eq!(v.kind(), LabelKind::CompatZero);
        // enumeration oracle: a channel is known iff its class is annotated
        for c in 0..4 {
            assert_eq!(known.is_known(c), c == 0 || c == 2);
        }
    }

    #[test]
    fn compat_label_rejects_corrupt_annotation() {
        let err = to_compat_label(2, &ClassSet::single(1), &space(3)).unwrap_err();
        assert!(matches!(err, Error::CorruptAnnotation { class: 2, .. }));
    }

    #[test]
    fn label_map_invariants() {
        assert!(PartialLabelMap::new(1, 2, vec![1, SENTINEL], ClassSet::single(1)).is_ok());
        assert!(PartialLabelMap::new(1, 2, vec![1, 2], ClassSet::single(1)).is_err());
        assert!(PartialLabelMap::new(1, 2, vec![1], ClassSet::single(1)).is_err());
        assert!(PartialLabelMap::new(1, 1, vec![SENTINEL], ClassSet::new()).is_err());
        let full = PartialLabelMap::full(1, 3, vec![0, 1, 2], 3).unwrap();
        assert!(full.is_fully_annotated(3));
        assert_eq!(full.class_mask(1), vec![false, true, false]);
    }

    #[test]
    fn label_vector_kind_checks() {
        assert!(LabelVector::from_values(vec![0.0, 1.0], LabelKind::OneHot).is_ok());
        assert!(LabelVector::from_values(vec![1.0, 1.0], LabelKind::OneHot).is_err());
        assert!(LabelVector::from_values(vec![0.0, 0.5, 0.5], LabelKind::Weak).is_ok());
        assert!(LabelVector::from_values(vec![0.0, 0.4, 0.5], LabelKind::Weak).is_err());
        assert!(LabelVector::from_values(vec![0.0, 0.1], LabelKind::CompatZero).is_err());
    }
}
