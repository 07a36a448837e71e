//! Generates a small synthetic dataset with manifests and reloads it.
//!
//! `cargo run --example synthetic_dataset -- /tmp/shapes`

use std::path::PathBuf;

use pcsc::dataio::{gen_dataset, load_manifest, write_dataset, ShapeFamily, SyntheticDatasetConfig};

fn main() -> pcsc::Result<()> {
    let dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("pcsc-shapes"));
    let cfg = SyntheticDatasetConfig {
        classes: vec![ShapeFamily::Box, ShapeFamily::Torus, ShapeFamily::Lshape],
        train_per_class: 4,
        test_per_class: 2,
        n_points: 256,
    };
    let ds = gen_dataset(&cfg, 42)?;
    write_dataset(&ds, &dir)?;
    let test = load_manifest(&dir.join("test.toml"))?;
    for e in &test.entries {
        println!("{:<22} {:<8} keypoints {:?}", e.id, e.class_label, e.keypoint_indices);
    }
    println!("{} train / {} test clouds in {}", ds.train.len(), ds.test.len(), dir.display());
    Ok(())
}
