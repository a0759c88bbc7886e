//! Rough conv throughput probe used to size the fast (desk) model presets.

use dfgr_autograd::conv;
use dfgr_autograd::tape::{Arr, Tape};
use ndarray::IxDyn;
use std::time::Instant;

fn bench(name: &str, n: usize, cin: usize, cout: usize, hw: usize, stride: usize, reps: usize) {
    let x0 = Arr::from_shape_simple_fn(IxDyn(&[n, cin, hw, hw]), || 0.5);
    let w0 = Arr::from_shape_simple_fn(IxDyn(&[cout, cin, 3, 3]), || 0.1);
    let start = Instant::now();
    for _ in 0..reps {
        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let w = tape.leaf(w0.clone());
        let y = conv::conv2d(x, w, stride, 1).sqr().sum_all();
        let _ = tape.backward(y);
    }
    let dt = start.elapsed().as_secs_f64() / reps as f64;
    let ho = (hw + 2 - 3) / stride + 1;
    let flops = 2.0 * (n * cout * ho * ho * cin * 9) as f64 * 3.0; // fwd + ~2x bwd
    println!("{name}: {:.1} ms/step  (~{:.2} GFLOP/s fwd+bwd)", dt * 1e3, flops / dt / 1e9);
}

fn main() {
    bench("cls stem 128x1->8 @32", 128, 1, 8, 32, 1, 5);
    bench("cls 128x8->16 @16 s2", 128, 8, 16, 16, 2, 5);
    bench("cls 128x16->32 @8 s2", 128, 16, 32, 8, 2, 5);
    bench("cls 128x32->64 @4", 128, 32, 64, 4, 1, 5);
    bench("gen 32x32->16 @8", 32, 32, 16, 8, 1, 10);
    bench("gen 32x16->8 @16", 32, 16, 8, 16, 1, 10);
    bench("gen 32x8->8 @32", 32, 8, 8, 32, 1, 10);
    bench("big 128x64->64 @8", 128, 64, 64, 8, 1, 3);
}
