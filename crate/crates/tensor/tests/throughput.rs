//! Rough single-thread throughput probe for the convolution path.
//! Ignored by default; run with
//! `cargo test -p uniqa-tensor --test throughput -- --ignored --nocapture`.

use std::time::Instant;
use uniqa_tensor::{Tape, Tensor};

fn bench<S: uniqa_tensor::Scalar>(label: &str) {
    let (c, h, w) = (32usize, 32usize, 32usize);
    let x = Tensor::<S>::from_fn(vec![c, h, w], |i| S::from_f64(0.01 * (i % 97) as f64));
    let wt = Tensor::<S>::from_fn(vec![c, c, 3, 3], |i| S::from_f64(0.001 * (i % 89) as f64))
        .with_grad();
    let b = Tensor::<S>::from_fn(vec![c], |i| S::from_f64(i as f64 * 1e-3)).with_grad();

    let iters = 200;
    let mut run = |n: usize| {
        let mut sink = 0.0f64;
        for _ in 0..n {
            let mut tape = Tape::new();
            let xv = tape.leaf(&x);
            let wv = tape.param(&wt);
            let bv = tape.param(&b);
            let y = tape.conv2d(xv, wv, bv, 1).unwrap();
            let y2 = tape.conv2d(y, wv, bv, 1).unwrap();
            let s = tape.sum(y2);
            tape.backward(s).unwrap();
            sink += tape.value(s).item().to_f64();
        }
        sink
    };
    run(20); // warmup
    let start = Instant::now();
    let sink = run(iters);
    let elapsed = start.elapsed().as_secs_f64();
    // two convs, forward plus roughly 2x backward, 2 flops per MAC
    let flops = iters as f64 * 2.0 * (c * c * 9 * h * w) as f64 * 2.0 * 3.0;
    println!(
        "{label}: {:.2} GFLOP/s effective ({:.1} ms/iter, sink {sink:.3e})",
        flops / elapsed / 1e9,
        elapsed * 1e3 / iters as f64
    );
}

#[test]
#[ignore]
fn conv_throughput() {
    bench::<f32>("f32 conv3x3 fwd+bwd");
    bench::<f64>("f64 conv3x3 fwd+bwd");
}
