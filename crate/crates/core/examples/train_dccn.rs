//! Two-stage training on round-robin partial phantoms, then test Dice.
//!
//! Small settings so it finishes in well under a minute in release mode.

use partialseg::data::{partial_dataset, phantom_dataset, PartialPolicy, PhantomSpec, Split};
use partialseg::eval::{evaluate_params, DEFAULT_EVAL_SEED};
use partialseg::network::BackboneConfig;
use partialseg::trainer::{TrainConfig, Trainer};

fn main() -> partialseg::Result<()> {
    let spec = PhantomSpec {
        height: 32,
        width: 32,
        test_count: 8,
        ..PhantomSpec::default()
    };
    let full = phantom_dataset(&spec, 96)?;
    let ds = partial_dataset(&full, PartialPolicy::OneLabelRoundRobin, 0)?;
    let cfg = TrainConfig {
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
    let trainer = Trainer::new(cfg, &ds)?;

    let s1 = trainer.train_stage1(trainer.init_state())?;
    let r1 = evaluate_params(trainer.network(), &s1.theta_p, true, &ds, Split::Test, DEFAULT_EVAL_SEED)?;
    println!("stage 1: {} steps, test Dice {:.4}", s1.step, r1.mean_dice);

    let s2 = trainer.train_stage2(s1)?;
    let r2 = evaluate_params(trainer.network(), &s2.theta_p, true, &ds, Split::Test, DEFAULT_EVAL_SEED)?;
    println!("stage 2: {} steps, test Dice {:.4}", s2.step, r2.mean_dice);
    for (name, stats) in &r2.per_class {
        println!("  {name:<4} {:.4} ± {:.4}", stats.mean, stats.std);
    }
    Ok(())
}
