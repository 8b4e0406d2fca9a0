//! Fits the multi-class Bayesian SVM to three Gaussian blobs in the plane by
//! expectation maximisation and reports train and held-out accuracy.
//!
//! ```text
//! cargo run --release --example svm_blobs
//! ```

use dgdn::distributions::{standard_normal, RngStream};
use dgdn::svm::{fit_em, predict, SvmState};

fn blobs(n: usize, rng: &mut RngStream) -> (Vec<Vec<f64>>, Vec<usize>) {
    let centres = [(-2.0, 0.0), (2.0, 0.0), (0.0, 2.5)];
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for i in 0..n {
        let c = i % centres.len();
        let (cx, cy) = centres[c];
        // trailing 1 is the bias feature
        xs.push(vec![
            cx + standard_normal(rng),
            cy + standard_normal(rng),
            1.0,
        ]);
        ys.push(c);
    }
    (xs, ys)
}

fn accuracy(svm: &SvmState, xs: &[Vec<f64>], ys: &[usize]) -> f64 {
    let hits = xs
        .iter()
        .zip(ys)
        .filter(|(x, &y)| predict(x, &svm.betas).0 == y)
        .count();
    hits as f64 / xs.len() as f64
}

fn main() -> dgdn::Result<()> {
    let mut rng = RngStream::new(3, 0);
    let (train_x, train_y) = blobs(300, &mut rng);
    let (test_x, test_y) = blobs(300, &mut rng);
    let mut svm = SvmState::new(3, 3, 1.0, 1e-6);
    for rounds in [1, 5, 20] {
        fit_em(&mut svm, &train_x, &train_y, rounds)?;
        println!(
            "after {rounds:>2} more rounds: train {:.3}, test {:.3}",
            accuracy(&svm, &train_x, &train_y),
            accuracy(&svm, &test_x, &test_y)
        );
    }
    for (c, b) in svm.betas.iter().enumerate() {
        println!("class {c}: beta = [{:.3}, {:.3}, {:.3}]", b[0], b[1], b[2]);
    }
    Ok(())
}
