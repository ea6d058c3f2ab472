// Generate the desk-scale glyph and grating datasets and round-trip one
// through the raw-array file format.

use dfa::data::{synthetic, Dataset, SyntheticConfig, SyntheticKind};
use dfa::harness::loaders::{load_dataset, save_raw_array, DatasetFormat};

pub fn run_example() -> dfa::Result<(Dataset, Dataset)> {
    let glyphs = synthetic(&SyntheticConfig {
        per_class: 20,
        ..Default::default()
    })?;
    let gratings = synthetic(&SyntheticConfig {
        kind: SyntheticKind::Gratings,
        per_class: 20,
        sample_seed: 2,
        ..Default::default()
    })?;

    let dir = std::env::temp_dir().join(format!("dfa-toy-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| dfa::DfaError::Io { path: dir.clone(), source: e })?;
    let path = dir.join("glyphs.raw");
    save_raw_array(&glyphs, &path)?;
    let reloaded = load_dataset(path.to_str().expect("utf-8 temp path"), DatasetFormat::Auto, None)?;
    let _ = std::fs::remove_dir_all(&dir);
    assert_eq!(reloaded, glyphs);

    println!(
        "glyphs: {} samples of {:?}, counts {:?}",
        glyphs.len(),
        glyphs.shape,
        glyphs.class_counts()
    );
    println!("gratings: {} samples of {:?}", gratings.len(), gratings.shape);
    Ok((glyphs, gratings))
}

#[allow(dead_code)]
fn main() -> dfa::Result<()> {
    run_example().map(|_| ())
}
