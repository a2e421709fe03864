//! Pairwise targets for a partially labeled image and a conditional set.
//!
//! Channel `2k` marks the intersection of the prediction with the
//! conditional mask of class `k`; channel `2k+1` marks the extra part.

use partialseg::data::{phantom_dataset, PhantomSpec};
use partialseg::label_model::PartialLabelMap;
use partialseg::pairing::{build_pairwise_target, ConditionalLabels};

fn main() -> partialseg::Result<()> {
    let spec = PhantomSpec {
        val_count: 0,
        test_count: 0,
        ..PhantomSpec::default()
    };
    let ds = phantom_dataset(&spec, 2)?;
    let (target, other) = (ds.sample(0), ds.sample(1));
    let (h, w) = target.image.shape();
    let m = ds.class_space().m();

    // target keeps LV only
    let lv = PartialLabelMap::from_class_mask(h, w, &target.labels.class_mask(1), 1)?;
    // conditional masks come from another image
    let masks = (0..m).map(|c| (c > 0).then(|| other.labels.class_mask(c))).collect();
    let cond = ConditionalLabels::from_masks(m, h * w, masks)?;
    let t = build_pairwise_target(&lv, &cond)?;

    for c in 0..2 * m {
        let known = t.known_channel(c).iter().filter(|&&k| k).count();
        let ones = (0..t.pixels()).filter(|&i| t.is_known(c, i) && t.value(c, i) == 1.0).count();
        let kind = if c % 2 == 0 { "inter" } else { "extra" };
        println!("channel {c} ({kind} {}): known {known:>4}  positive {ones:>4}", ds.class_space().name(c / 2));
    }
    Ok(())
}
