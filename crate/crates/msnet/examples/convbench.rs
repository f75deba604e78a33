//! Quick conv throughput probe used while sizing the default desk config.

use msnet::engine::{Graph, Tensor};
use std::time::Instant;

fn bench(b: usize, ci: usize, co: usize, hw: usize, iters: usize) {
    let x = Tensor::full(&[b, ci, hw, hw], 0.5);
    let w = Tensor::full(&[co, ci, 3, 3], 0.01);
    let bias = Tensor::zeros(&[co]);
    let t0 = Instant::now();
    for _ in 0..iters {
        let mut g = Graph::new();
        let xn = g.leaf(x.clone());
        let wn = g.leaf(w.clone());
        let bn = g.leaf(bias.clone());
        let y = g.conv2d(xn, wn, bn, 1, 1).unwrap();
        let loss = g.sum(y);
        g.backward(loss).unwrap();
    }
    let dt = t0.elapsed().as_secs_f64() / iters as f64;
    let macs = (b * co * hw * hw * ci * 9) as f64;
    // forward + dx + dw ~ 3x forward MACs
    println!(
        "b={b} {ci}->{co} @{hw}x{hw}: {:.2} ms/iter fwd+bwd, ~{:.1} GFLOP/s",
        dt * 1e3,
        3.0 * 2.0 * macs / dt / 1e9
    );
}

fn main() {
    for _ in 0..2 {
        bench(5, 8, 8, 64, 20);
        bench(5, 4, 4, 64, 20);
        bench(5, 64, 64, 8, 50);
        bench(5, 128, 128, 4, 50);
    }
}
