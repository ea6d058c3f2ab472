// Evaluate a trained model under FGSM, PGD and CW.

use dfa::attacks::{evaluate_robustness, AttackConfig, RobustnessReport};
use dfa::data::{synthetic, SyntheticConfig};
use dfa::trainer::{train, TrainConfig};

pub fn run_example() -> dfa::Result<RobustnessReport> {
    let spec = SyntheticConfig {
        n_classes: 4,
        per_class: 25,
        side: 12,
        ..Default::default()
    };
    let data = synthetic(&spec)?;
    let test = synthetic(&SyntheticConfig { per_class: 10, sample_seed: 9, ..spec })?;
    let config = TrainConfig {
        epochs: 5,
        batch_size: 20,
        embed_dim: 16,
        ..Default::default()
    };
    let (model, _) = train(&data, &config)?;

    let attacks = [
        AttackConfig::fgsm(8.0 / 255.0),
        AttackConfig::pgd(4.0 / 255.0, 2.0 / 255.0, 8),
        AttackConfig::cw(0.1, 50),
    ];
    let report = evaluate_robustness(&model, &test, &attacks)?;
    println!("clean {:.2}%", report.clean_accuracy);
    for a in &report.attacks {
        println!("{:<20} {:.2}%", a.label, a.accuracy);
    }
    println!("mean {:.2} ± {:.2}", report.mean, report.std);
    Ok(report)
}

#[allow(dead_code)]
fn main() -> dfa::Result<()> {
    run_example().map(|_| ())
}
