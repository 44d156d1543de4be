//! Prints the cosine between reverse-pass and exact unrolled meta-gradients
//! over random instances, the numbers behind the gradcheck thresholds.
//!
//!     cargo run --release -p seqdistill --example calibrate -- [instances] [seed]

use seqdistill::gradcheck::{fresh_mean_cosine, oracle_cosines, WARM_MIN_COSINE};
use seqdistill::optim::ReverseOptions;

fn main() -> seqdistill::Result<()> {
    let mut args = std::env::args().skip(1);
    let instances = args.next().and_then(|s| s.parse().ok()).unwrap_or(20);
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(1000);
    println!("{:>3}  {:>10}  {:>10}  {:>10}  {:>10}", "T", "warm min", "warm mean", "zero min", "zero mean");
    for steps in [1, 2, 5, 10, 20] {
        let (warm, fresh) = oracle_cosines(steps, instances, seed, &ReverseOptions::default())?;
        let min = |v: &[f64]| v.iter().cloned().fold(f64::INFINITY, f64::min);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        println!(
            "{steps:>3}  {:>10.5}  {:>10.5}  {:>10.5}  {:>10.5}",
            min(&warm),
            mean(&warm),
            min(&fresh),
            mean(&fresh)
        );
    }
    println!("enforced: warm min >= {WARM_MIN_COSINE}; zero mean >= {} / {} / {} at T = 2 / 5 / 10",
        fresh_mean_cosine(2), fresh_mean_cosine(5), fresh_mean_cosine(10));
    Ok(())
}
