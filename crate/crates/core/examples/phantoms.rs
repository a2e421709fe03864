//! Generate cardiac-like phantoms, then drop to one foreground label per image.
//!
//! ```bash
//! cargo run --release --example phantoms -- /tmp/phantoms
//! ```

use std::path::PathBuf;

use partialseg::data::{generate_phantoms, load_dataset, simulate_partial, PartialPolicy, PhantomSpec, Split};

fn main() -> partialseg::Result<()> {
    let root = std::env::args_os()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("partialseg-phantoms"));
    let spec = PhantomSpec {
        val_count: 2,
        test_count: 4,
        ..PhantomSpec::default()
    };
    let full = generate_phantoms(&spec, 16, &root.join("full"))?;
    let partial = simulate_partial(&full, &root.join("full"), PartialPolicy::OneLabelRoundRobin, 0, &root.join("partial"))?;

    let ds = load_dataset(&root.join("partial").join("manifest.json"))?;
    println!("{} records in {}", partial.records.len(), root.display());
    for id in ds.ids(Split::Train).into_iter().take(6) {
        let s = ds.sample(id);
        let kept: Vec<&str> = s.labels.annotated().iter().map(|c| ds.class_space().name(c)).collect();
        println!(
            "  {}  annotated {:?}  labeled pixels {}/{}",
            s.name,
            kept,
            s.labels.labeled_count(),
            s.labels.len()
        );
    }
    Ok(())
}
