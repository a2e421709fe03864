//! Brute-force compatibility check of a pixel loss under two annotation regimes.
//!
//! A loss is compatible for a ground truth `y` when `y` minimizes it under
//! both partial representations. Minimizers are found by exhaustive search on
//! a grid with spacing `1/N`: the probability simplex for categorical losses,
//! the unit box for per-channel losses. Grid points are kept as integer
//! coordinates so set membership is exact.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label_model::{
    to_compat_label, to_weak_label, ChannelMask, ClassSet, ClassSpace, LabelKind, LabelVector, SENTINEL,
};
use crate::losses::{compatible_ce_pixel, partial_ce_pixel, weak_label_ce_pixel, LossConfig};

/// Upper bound on grid points per search.
pub const MAX_GRID_POINTS: usize = 50_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossId {
    StandardCe,
    #[serde(alias = "weak_label_ce")]
    WeakCe,
    PartialCe,
    CompatibleCe,
}

impl LossId {
    pub const ALL: [LossId; 4] = [LossId::StandardCe, LossId::WeakCe, LossId::PartialCe, LossId::CompatibleCe];

    pub fn as_str(self) -> &'static str {
        match self {
            LossId::StandardCe => "standard_ce",
            LossId::WeakCe => "weak_ce",
            LossId::PartialCe => "partial_ce",
            LossId::CompatibleCe => "compatible_ce",
        }
    }

    pub fn domain(self) -> Domain {
        match self {
            LossId::CompatibleCe => Domain::Box,
            _ => Domain::Simplex,
        }
    }
}

impl fmt::Display for LossId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard_ce" | "ce" => Ok(LossId::StandardCe),
            "weak_ce" | "weak_label_ce" => Ok(LossId::WeakCe),
            "partial_ce" => Ok(LossId::PartialCe),
            "compatible_ce" => Ok(LossId::CompatibleCe),
            other => Err(Error::Config(format!(
                "unknown loss {other:?}; expected standard_ce, weak_ce, partial_ce or compatible_ce"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    /// Points with non-negative coordinates summing to one.
    Simplex,
    /// `[0, 1]^m`.
    Box,
}

/// A partial label of one pixel and the channels it constrains.
#[derive(Debug, Clone, PartialEq)]
pub struct Representation {
    pub label: LabelVector,
    pub known: ChannelMask,
}

impl Representation {
    /// Encoding of ground-truth class `gt` when only `annotated` classes were labeled,
    /// in the form `loss` consumes.
    pub fn for_regime(loss: LossId, gt: usize, annotated: &ClassSet, space: &ClassSpace) -> Result<Self> {
        space.check(gt)?;
        let m = space.m();
        let labeled = annotated.contains(gt);
        match loss {
            LossId::StandardCe => Ok(Self {
                label: LabelVector::one_hot(gt, m),
                known: ChannelMask::all(m),
            }),
            LossId::WeakCe if labeled => Ok(Self {
                label: LabelVector::one_hot(gt, m),
                known: ChannelMask::all(m),
            }),
            LossId::WeakCe => Ok(Self {
                label: to_weak_label(gt, annotated, space)?,
                known: ChannelMask::none(m),
            }),
            LossId::PartialCe | LossId::CompatibleCe => {
                let pixel = if labeled { gt as u8 } else { SENTINEL };
                let (label, known) = to_compat_label(pixel, annotated, space)?;
                Ok(Self { label, known })
            }
        }
    }

    /// Whether this could encode ground-truth class `gt`.
    fn encodes(&self, gt: usize) -> bool {
        let v = self.label.values();
        match self.label.kind() {
            LabelKind::OneHot => self.label.hot_class() == Some(gt),
            LabelKind::Weak => v[gt] > 0.0,
            LabelKind::CompatZero => !self.known.is_known(gt),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompatCase {
    pub space: ClassSpace,
    pub gt: usize,
    pub rep_a: Representation,
    pub rep_b: Representation,
    pub loss: LossId,
    pub grid_step: f64,
    pub tolerance: f64,
}

impl CompatCase {
    /// Case for ground truth `gt` under annotation regimes `ann_a` and `ann_b`,
    /// with grid step 0.01 and tolerance 1e-9.
    pub fn from_regimes(loss: LossId, space: ClassSpace, gt: usize, ann_a: &ClassSet, ann_b: &ClassSet) -> Result<Self> {
        let rep_a = Representation::for_regime(loss, gt, ann_a, &space)?;
        let rep_b = Representation::for_regime(loss, gt, ann_b, &space)?;
        let case = Self {
            space,
            gt,
            rep_a,
            rep_b,
            loss,
            grid_step: 0.01,
            tolerance: 1e-9,
        };
        case.validate()?;
        Ok(case)
    }

    pub fn validate(&self) -> Result<()> {
        self.space.check(self.gt)?;
        grid_divisions(self.grid_step)?;
        if !(self.tolerance >= 0.0 && self.tolerance.is_finite()) {
            return Err(Error::Config(format!("tolerance must be finite and >= 0, got {}", self.tolerance)));
        }
        let m = self.space.m();
        for (name, rep) in [("rep_a", &self.rep_a), ("rep_b", &self.rep_b)] {
            if rep.label.len() != m || rep.known.len() != m {
                return Err(Error::ShapeMismatch(format!("{name} does not have {m} channels")));
            }
            if !rep.encodes(self.gt) {
                return Err(Error::InvalidLabel(format!("{name} does not encode class {}", self.gt)));
            }
        }
        Ok(())
    }
}

/// `N` with `N * step == 1`, for steps in `(0, 0.25]`.
pub fn grid_divisions(step: f64) -> Result<u32> {
    if !(step > 0.0 && step <= 0.25) {
        return Err(Error::Config(format!("grid step must lie in (0, 0.25], got {step}")));
    }
    let n = (1.0 / step).round();
    if (n * step - 1.0).abs() > 1e-9 || n > u32::MAX as f64 {
        return Err(Error::Config(format!("grid step {step} does not divide 1")));
    }
    Ok(n as u32)
}

/// Number of grid points of `domain` in dimension `m` with `n` divisions.
pub fn grid_size(domain: Domain, m: usize, n: u32) -> Option<usize> {
    match domain {
        Domain::Box => (n as usize + 1).checked_pow(m as u32),
        // C(n + m - 1, m - 1)
        Domain::Simplex => {
            let mut acc: u128 = 1;
            for i in 1..m as u128 {
                acc = acc * (n as u128 + i) / i;
                if acc > usize::MAX as u128 {
                    return None;
                }
            }
            Some(acc as usize)
        }
    }
}

/// Visits every grid point in lexicographic order.
fn for_each_point(domain: Domain, m: usize, n: u32, mut f: impl FnMut(&[u32])) {
    let mut p = vec![0u32; m];
    match domain {
        Domain::Box => loop {
            f(&p);
            let mut i = m;
            loop {
                if i == 0 {
                    return;
                }
                i -= 1;
                if p[i] < n {
                    p[i] += 1;
                    break;
                }
                p[i] = 0;
            }
        },
        Domain::Simplex => {
            fn rec(p: &mut [u32], at: usize, left: u32, f: &mut dyn FnMut(&[u32])) {
                if at + 1 == p.len() {
                    p[at] = left;
                    f(p);
                    return;
                }
                for v in 0..=left {
                    p[at] = v;
                    rec(p, at + 1, left - v, f);
                }
            }
            rec(&mut p, 0, n, &mut f);
        }
    }
}

/// Loss of `loss` at probability vector `pred` under `rep`.
pub fn evaluate_loss(loss: LossId, pred: &[f64], rep: &Representation, cfg: &LossConfig) -> Result<f64> {
    match loss {
        LossId::StandardCe | LossId::WeakCe => weak_label_ce_pixel(pred, &rep.label, cfg),
        LossId::PartialCe => {
            let pixel = rep.label.hot_class().map_or(SENTINEL, |c| c as u8);
            partial_ce_pixel(pred, pixel, cfg)
        }
        LossId::CompatibleCe => compatible_ce_pixel(pred, rep.label.values(), &rep.known, cfg).map(|l| l.value),
    }
}

/// Grid minimizers of a loss, stored as flattened integer coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct ArgminSet {
    m: usize,
    n: u32,
    points: Vec<u32>,
    pub min_loss: f64,
}

impl ArgminSet {
    pub fn len(&self) -> usize {
        self.points.len() / self.m.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn divisions(&self) -> u32 {
        self.n
    }

    pub fn iter(&self) -> impl Iterator<Item = &[u32]> + '_ {
        self.points.chunks_exact(self.m)
    }

    pub fn contains(&self, point: &[u32]) -> bool {
        point.len() == self.m && self.iter().any(|p| p == point)
    }

    /// Probability coordinates of a grid point.
    pub fn to_probs(&self, point: &[u32]) -> Vec<f64> {
        point.iter().map(|&v| f64::from(v) / f64::from(self.n)).collect()
    }

    /// Minimizer closest to `target` in Euclidean distance, first in grid order on ties.
    pub fn nearest(&self, target: &[f64]) -> Option<(Vec<f64>, f64)> {
        let mut best: Option<(&[u32], f64)> = None;
        for p in self.iter() {
            let d: f64 = p
                .iter()
                .zip(target)
                .map(|(&v, &t)| (f64::from(v) / f64::from(self.n) - t).powi(2))
                .sum();
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((p, d));
            }
        }
        best.map(|(p, d)| (self.to_probs(p), d.sqrt()))
    }
}

/// All grid points whose loss is within `case.tolerance` of the grid minimum.
pub fn argmin_set(loss: LossId, rep: &Representation, case: &CompatCase) -> Result<ArgminSet> {
    let m = case.space.m();
    let n = grid_divisions(case.grid_step)?;
    let domain = loss.domain();
    match grid_size(domain, m, n) {
        Some(size) if size <= MAX_GRID_POINTS => {}
        _ => {
            return Err(Error::Config(format!(
                "grid with {m} dimensions and step {} exceeds {MAX_GRID_POINTS} points",
                case.grid_step
            )))
        }
    }
    let cfg = LossConfig::default();
    let mut pred = vec![0.0; m];
    let mut values = Vec::new();
    let mut failure = None;
    for_each_point(domain, m, n, |p| {
        if failure.is_some() {
            return;
        }
        for (x, &v) in pred.iter_mut().zip(p) {
            *x = f64::from(v) / f64::from(n);
        }
        match evaluate_loss(loss, &pred, rep, &cfg) {
            Ok(v) => values.push(v),
            Err(e) => failure = Some(e),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let min_loss = values.iter().copied().fold(f64::INFINITY, f64::min);
    let cut = min_loss + case.tolerance;
    let mut points = Vec::new();
    let mut index = 0;
    for_each_point(domain, m, n, |p| {
        if values[index] <= cut {
            points.extend_from_slice(p);
        }
        index += 1;
    });
    Ok(ArgminSet { m, n, points, min_loss })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Compatible,
    Incompatible,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Compatible => "COMPATIBLE",
            Verdict::Incompatible => "INCOMPATIBLE",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompatReport {
    pub loss_id: LossId,
    pub verdict: Verdict,
    pub d1_size: usize,
    pub d2_size: usize,
    pub gt_in_d1: bool,
    pub gt_in_d2: bool,
    pub grid_step: f64,
    pub tolerance: f64,
    pub gt: Vec<f64>,
    pub min_loss_d1: f64,
    pub min_loss_d2: f64,
    /// Minimizer of each set nearest to the ground truth, with its distance.
    pub nearest_d1: Vec<f64>,
    pub nearest_d1_distance: f64,
    pub nearest_d2: Vec<f64>,
    pub nearest_d2_distance: f64,
}

pub fn check_compatibility(case: &CompatCase) -> Result<CompatReport> {
    case.validate()?;
    let m = case.space.m();
    let n = grid_divisions(case.grid_step)?;
    let mut gt_point = vec![0u32; m];
    gt_point[case.gt] = n;
    let gt: Vec<f64> = LabelVector::one_hot(case.gt, m).values().to_vec();
    let d1 = argmin_set(case.loss, &case.rep_a, case)?;
    let d2 = argmin_set(case.loss, &case.rep_b, case)?;
    let gt_in_d1 = d1.contains(&gt_point);
    let gt_in_d2 = d2.contains(&gt_point);
    let (nearest_d1, nearest_d1_distance) = d1.nearest(&gt).unwrap_or_default();
    let (nearest_d2, nearest_d2_distance) = d2.nearest(&gt).unwrap_or_default();
    Ok(CompatReport {
        loss_id: case.loss,
        verdict: if gt_in_d1 && gt_in_d2 {
            Verdict::Compatible
        } else {
            Verdict::Incompatible
        },
        d1_size: d1.len(),
        d2_size: d2.len(),
        gt_in_d1,
        gt_in_d2,
        grid_step: case.grid_step,
        tolerance: case.tolerance,
        gt,
        min_loss_d1: d1.min_loss,
        min_loss_d2: d2.min_loss,
        nearest_d1,
        nearest_d1_distance,
        nearest_d2,
        nearest_d2_distance,
    })
}
