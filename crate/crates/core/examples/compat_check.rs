//! Brute-force compatibility check of four label regimes.
//!
//! The image holds class 2 at one pixel. Annotator A labeled class 0 only,
//! annotator B class 1 only. A loss is compatible when the ground truth
//! minimizes it under both partial labelings.
//!
//! ```bash
//! cargo run --release --example compat_check
//! ```

use partialseg::compat_verifier::{check_compatibility, CompatCase, LossId};
use partialseg::label_model::{ClassSet, ClassSpace};

fn main() -> partialseg::Result<()> {
    let space = ClassSpace::with_classes(3)?;
    let (a, b) = (ClassSet::single(0), ClassSet::single(1));
    for loss in [LossId::StandardCe, LossId::WeakCe, LossId::PartialCe, LossId::CompatibleCe] {
        let case = CompatCase::from_regimes(loss, space.clone(), 2, &a, &b)?;
        let r = check_compatibility(&case)?;
        println!(
            "{:<14} {:<13} |D1| = {:<5} |D2| = {:<5} gt in D1: {:<5} gt in D2: {}",
            loss.as_str(),
            format!("{:?}", r.verdict),
            r.d1_size,
            r.d2_size,
            r.gt_in_d1,
            r.gt_in_d2
        );
    }
    Ok(())
}
