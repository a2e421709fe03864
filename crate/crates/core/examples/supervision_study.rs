//! Test Dice as the share of fully annotated training images grows.

use partialseg::data::{phantom_dataset, PhantomSpec};
use partialseg::eval::{supervision_study, DEFAULT_EVAL_SEED};
use partialseg::network::BackboneConfig;
use partialseg::trainer::TrainConfig;

fn main() -> partialseg::Result<()> {
    let spec = PhantomSpec {
        height: 32,
        width: 32,
        test_count: 8,
        ..PhantomSpec::default()
    };
    let ds = phantom_dataset(&spec, 96)?;
    let base = TrainConfig {
        backbone: BackboneConfig {
            depth: 3,
            base_filters: 16,
            height: 32,
            width: 32,
            ..BackboneConfig::toy(4)
        },
        stage1_epochs: 30,
        stage2_max_steps: 100,
        ..TrainConfig::default()
    };
    let points = supervision_study(&ds, &base, &[0.0, 0.5, 1.0], 0, DEFAULT_EVAL_SEED, None)?;
    println!("full fraction | mean Dice");
    for p in points {
        println!("{:>13.2} | {:.4}", p.full_fraction, p.report.mean_dice);
    }
    Ok(())
}
