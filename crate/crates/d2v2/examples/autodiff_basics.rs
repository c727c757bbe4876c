//! The autodiff graph in isolation: build a small computation, backprop,
//! and cross-check against central finite differences.

use d2v2::graph::{grad_of, Graph};
use d2v2::tensor::Tensor;

fn main() {
    // f(x) = sum(x^2) at x = [1, 2]
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::new(vec![1, 2], vec![1.0, 2.0]));
    let sq = g.mul(x, x);
    let loss = g.sum_all(sq);
    let grads = grad_of(&mut g, loss, &[("x".into(), x)]).unwrap();
    println!("f(x) = sum(x^2), x = [1, 2]");
    println!("  backprop grad : {:?}", grads[0].1.data());
    println!("  analytic      : [2.0, 4.0]");

    // a two-layer network, checked element by element against finite
    // differences
    let w1 = Tensor::from_f64s(vec![3, 4], &(0..12).map(|i| (i as f64 - 6.0) * 0.1).collect::<Vec<_>>());
    let w2 = Tensor::from_f64s(vec![4, 1], &[0.3, -0.2, 0.5, 0.1]);
    let input = Tensor::from_f64s(vec![2, 3], &[0.1, -0.4, 0.7, 0.2, 0.5, -0.1]);

    let eval = |w1: &Tensor<f64>, w2: &Tensor<f64>| -> (f64, Vec<Tensor<f64>>) {
        let mut g = Graph::<f64>::new();
        let xv = g.constant(input.clone());
        let w1v = g.param(w1.clone());
        let w2v = g.param(w2.clone());
        let h = g.matmul(xv, w1v, false);
        let h = g.gelu(h);
        let y = g.matmul(h, w2v, false);
        let sq = g.mul(y, y);
        let loss = g.mean_all(sq);
        let lv = g.value(loss).item();
        let grads = grad_of(&mut g, loss, &[("w1".into(), w1v), ("w2".into(), w2v)]).unwrap();
        (lv, grads.into_iter().map(|(_, t)| t).collect())
    };

    let (loss, analytic) = eval(&w1, &w2);
    println!("\ntwo-layer toy network, loss = {loss:.6}");
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (pi, base) in [w1.clone(), w2.clone()].iter().enumerate() {
        for ei in 0..base.numel() {
            let mut plus = [w1.clone(), w2.clone()];
            plus[pi].data_mut()[ei] += h;
            let mut minus = [w1.clone(), w2.clone()];
            minus[pi].data_mut()[ei] -= h;
            let fd = (eval(&plus[0], &plus[1]).0 - eval(&minus[0], &minus[1]).0) / (2.0 * h);
            let bp = analytic[pi].data()[ei];
            worst = worst.max((fd - bp).abs() / fd.abs().max(bp.abs()).max(1e-4));
        }
    }
    println!("  worst relative disagreement with finite differences: {worst:.3e}");
    assert!(worst < 1e-4);
    println!("  (within the 1e-4 contract)");
}
