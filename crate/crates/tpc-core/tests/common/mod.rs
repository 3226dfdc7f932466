//! Shared helpers for integration tests: a central finite-difference
//! gradient oracle and seeded random data. The oracle only re-evaluates
//! the forward closure; it never touches tape gradients.

#![allow(dead_code)]

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Central finite differences of `f` w.r.t. every entry of every input
/// buffer, step `h`.
pub fn finite_diff<F>(f: F, inputs: &[Vec<f64>], h: f64) -> Vec<Vec<f64>>
where
    F: Fn(&[Vec<f64>]) -> f64,
{
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = vec![0.0; inputs[i].len()];
        for j in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            plus[i][j] += h;
            let mut minus = inputs.to_vec();
            minus[i][j] -= h;
            g[j] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        grads.push(g);
    }
    grads
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / f64::max(1e-6, f64::max(a.abs(), b.abs()))
}

pub fn assert_grads_close(analytic: &[Vec<f64>], numeric: &[Vec<f64>], tol: f64, what: &str) {
    assert_eq!(analytic.len(), numeric.len());
    for (bi, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        assert_eq!(a.len(), n.len(), "{what}: buffer {bi} length");
        for (j, (&av, &nv)) in a.iter().zip(n.iter()).enumerate() {
            let e = rel_err(av, nv);
            assert!(
                e < tol,
                "{what}: grad mismatch at buffer {bi} index {j}: analytic {av}, numeric {nv}, rel err {e}"
            );
        }
    }
}
