//! Toy ablation: plain baseline against the conditional variants.

use partialseg::data::{partial_dataset, phantom_dataset, PartialPolicy, PhantomSpec};
use partialseg::eval::{run_ablation, AblationRow, DEFAULT_EVAL_SEED};
use partialseg::network::BackboneConfig;
use partialseg::trainer::TrainConfig;

fn main() -> partialseg::Result<()> {
    let spec = PhantomSpec {
        height: 32,
        width: 32,
        test_count: 8,
        ..PhantomSpec::default()
    };
    let ds = partial_dataset(&phantom_dataset(&spec, 96)?, PartialPolicy::OneLabelRoundRobin, 0)?;
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
    let rows = ["none", "cond,cce", "cond,cce,p", "cond,cce,p,dual"]
        .iter()
        .map(|s| AblationRow::parse(s))
        .collect::<partialseg::Result<Vec<_>>>()?;
    let table = run_ablation(&ds, &base, &rows, DEFAULT_EVAL_SEED, None)?;
    print!("{}", table.markdown());
    Ok(())
}
