//! Scratch probe for Sinkhorn convergence scales (not part of the library).

use w2restrict_core::distributions::{sample_gaussian, GaussianSpec};
use w2restrict_core::oracle::{exact_w2_assignment, sinkhorn};

fn main() {
    for (n, seed) in [(20usize, 1u64), (50, 2), (100, 3)] {
        let a = sample_gaussian(&GaussianSpec::standard(2), n, seed * 10 + 1).unwrap();
        let b = sample_gaussian(&GaussianSpec::standard(2), n, seed * 10 + 2).unwrap();
        for eps in [0.2, 0.25, 0.3] {
            for sweeps in [100usize, 200] {
                let res = sinkhorn(&a, &b, eps, sweeps).unwrap();
                println!(
                    "n={n} eps={eps} sweeps={sweeps}: violation={:.3e} value={:.6}",
                    res.marginal_violation, res.coupling.value
                );
            }
        }
    }
    let a = sample_gaussian(&GaussianSpec::standard(2), 12, 21).unwrap();
    let b = sample_gaussian(&GaussianSpec::standard(2), 12, 22).unwrap();
    let exact = exact_w2_assignment(&a, &b).unwrap().w2_squared;
    println!("exact = {exact:.6}");
    for sweeps in [5usize, 10, 25, 50, 100, 200, 400] {
        let res = sinkhorn(&a, &b, 0.05, sweeps).unwrap();
        println!(
            "sweeps={sweeps}: value={:.8} violation={:.3e}",
            res.coupling.value, res.marginal_violation
        );
    }
}
