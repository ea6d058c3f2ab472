// Class compactness and the Lipschitz residual before and after training.

use dfa::analysis::{compactness, probe_dataset, CompactnessReport, LipschitzProbe};
use dfa::data::{synthetic, SyntheticConfig};
use dfa::rng::seeded;
use dfa::trainer::{initial_snapshot, train_from, TrainConfig};

pub fn run_example() -> dfa::Result<[(CompactnessReport, LipschitzProbe); 2]> {
    let data = synthetic(&SyntheticConfig {
        n_classes: 4,
        per_class: 25,
        side: 12,
        ..Default::default()
    })?;
    let config = TrainConfig {
        epochs: 5,
        batch_size: 20,
        embed_dim: 16,
        ..Default::default()
    };
    let init = initial_snapshot(&data, &config)?;
    let (trained, _) = train_from(init.clone(), &data, &config)?;
    let mut out = Vec::new();
    for (name, model) in [("init", &init), ("trained", &trained)] {
        let c = compactness(model, &data)?;
        let p = probe_dataset(model, &data, 200, &mut seeded(1))?;
        println!(
            "{name:<8} class std {:.4} total std {:.4} residual mean {:.4} max {:.4}",
            c.mean_class_std(),
            c.total_std,
            p.mean,
            p.max
        );
        out.push((c, p));
    }
    Ok(out.try_into().expect("two models"))
}

#[allow(dead_code)]
fn main() -> dfa::Result<()> {
    run_example().map(|_| ())
}
