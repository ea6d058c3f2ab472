// Draw a Beta(1, 1) coefficient and mix a pair of samples and labels.

use dfa::mixing::{mix, one_hot, sample_lambda, MixedTriple};
use dfa::rng::seeded;
use ndarray::array;

pub fn run_example() -> dfa::Result<MixedTriple> {
    let mut rng = seeded(3);
    let lam = sample_lambda(1.0, &mut rng)?;
    let x_i = array![[0.0, 0.2, 1.0, 0.5]];
    let x_j = array![[1.0, 0.6, 0.0, 0.5]];
    let y_i = one_hot(&[0], 3)?;
    let y_j = one_hot(&[2], 3)?;
    let triple = mix(x_i.view(), x_j.view(), y_i.view(), y_j.view(), &lam)?;
    println!("lambda = {:.4}", triple.lambda);
    println!("x_hat  = {}", triple.x_hat);
    println!("y      = {}", triple.y_mixed);
    Ok(triple)
}

#[allow(dead_code)]
fn main() -> dfa::Result<()> {
    run_example().map(|_| ())
}
