// Scratch benchmark of the dense Cholesky cost at alignment problem size.

use panofuse_core::nalgebra::{DMatrix, DVector};
use std::time::Instant;

fn main() {
    for n in [1280usize, 2560] {
        let mut a = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                a[(i, j)] = 1.0 / (1.0 + (i as f64 - j as f64).abs());
            }
            a[(i, i)] += n as f64;
        }
        let t0 = Instant::now();
        let chol = a.clone().cholesky().expect("spd");
        let t1 = t0.elapsed().as_secs_f64();
        let b = DVector::<f64>::from_element(n, 1.0);
        let x = chol.solve(&b);
        println!("n={n}: cholesky {t1:.2}s, x0={:.3e}", x[0]);
    }
}
