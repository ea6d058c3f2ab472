// Build a frozen orthogonal cosine classifier and score a few embeddings.

use dfa::head::OrthogonalHead;
use dfa::rng::seeded;
use ndarray::Array1;

pub fn run_example() -> dfa::Result<OrthogonalHead> {
    let head = OrthogonalHead::init_orthogonal(10, 64, &mut seeded(0))?;
    println!("max |w_k . w_l| = {:.3e}", head.max_offdiag_dot());

    // An embedding along class 3's weight vector scores cosine 1 there.
    let v: Array1<f64> = head.weights().row(3).mapv(|w| 2.5 * w);
    let s = head.cosine_scores(v.view())?;
    println!("scores: {:.3}", s.scores);
    println!("top class: {}", dfa::model::argmax_rows(s.scores.view().insert_axis(ndarray::Axis(0)))[0]);
    Ok(head)
}

#[allow(dead_code)]
fn main() -> dfa::Result<()> {
    run_example().map(|_| ())
}
