// Train the reference extractor with the aggregation objective and with
// plain cross-entropy, then compare their per-epoch losses.

use dfa::data::{synthetic, SyntheticConfig};
use dfa::trainer::{train, EpochMetrics, TrainConfig, TrainMode};

pub fn run_example() -> dfa::Result<Vec<(TrainMode, Vec<EpochMetrics>)>> {
    let data = synthetic(&SyntheticConfig {
        n_classes: 4,
        per_class: 25,
        side: 12,
        ..Default::default()
    })?;
    let mut runs = Vec::new();
    for mode in [TrainMode::Vanilla, TrainMode::Dfa] {
        let config = TrainConfig {
            mode,
            epochs: 4,
            batch_size: 20,
            embed_dim: 16,
            ..Default::default()
        };
        let (model, history) = train(&data, &config)?;
        println!("{mode}:");
        for m in &history {
            println!("  epoch {} L_a {:.5} L_c {:.4} acc {:.1}%", m.epoch, m.l_a, m.l_c, m.clean_accuracy);
        }
        assert_eq!(model.epoch, config.epochs);
        runs.push((mode, history));
    }
    Ok(runs)
}

#[allow(dead_code)]
fn main() -> dfa::Result<()> {
    run_example().map(|_| ())
}
