//! Rough throughput check for the matmul kernels at the shapes the toy
//! models actually use.

use d2v2::tensor::{matmul_at, matmul_nn, matmul_nt, Scalar};
use std::time::Instant;

fn bench<E: Scalar>(label: &str, m: usize, k: usize, n: usize, reps: usize) {
    let a: Vec<E> = (0..m * k).map(|i| E::from_f64((i % 13) as f64 * 0.1)).collect();
    let b: Vec<E> = (0..k * n).map(|i| E::from_f64((i % 7) as f64 * 0.1)).collect();
    let bt: Vec<E> = (0..n * k).map(|i| E::from_f64((i % 7) as f64 * 0.1)).collect();
    let mut out = vec![E::zero(); m * n];
    let mut out_at = vec![E::zero(); k * n];

    let t = Instant::now();
    for _ in 0..reps {
        out.iter_mut().for_each(|v| *v = E::zero());
        matmul_nn(&a, &b, m, k, n, &mut out);
    }
    let el = t.elapsed().as_secs_f64();
    let gf = (2.0 * (m * k * n * reps) as f64) / el / 1e9;
    println!("{label} nn {m}x{k}x{n}: {gf:.2} GFLOP/s");

    let t = Instant::now();
    for _ in 0..reps {
        out.iter_mut().for_each(|v| *v = E::zero());
        matmul_nt(&a, &bt, m, k, n, &mut out);
    }
    let el = t.elapsed().as_secs_f64();
    let gf = (2.0 * (m * k * n * reps) as f64) / el / 1e9;
    println!("{label} nt {m}x{k}x{n}: {gf:.2} GFLOP/s");

    let t = Instant::now();
    for _ in 0..reps {
        out_at.iter_mut().for_each(|v| *v = E::zero());
        matmul_at(&a, &out, m, k, n, &mut out_at);
    }
    let el = t.elapsed().as_secs_f64();
    let gf = (2.0 * (m * k * n * reps) as f64) / el / 1e9;
    println!("{label} at {m}x{k}x{n}: {gf:.2} GFLOP/s");
}

fn main() {
    // token-projection shapes for the toy ViT (batch*tokens, width, width)
    bench::<f32>("f32", 128, 192, 192, 2000);
    bench::<f32>("f32", 128, 192, 768, 500);
    bench::<f32>("f32", 13, 192, 192, 20000);
    bench::<f64>("f64", 128, 192, 192, 1000);
    bench::<f64>("f64", 128, 192, 768, 250);
}
