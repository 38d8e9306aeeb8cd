use cqnp::autodiff::{gemm_acc, Matrix, Trans};
use std::time::Instant;
fn main() {
    // one w128d3 chunk-ish layer: (4000 x 128) * (128 x 128)
    let a = Matrix::zeros(4000, 128);
    let b = Matrix::zeros(128, 128);
    let mut c = Matrix::zeros(4000, 128);
    let t0 = Instant::now();
    let reps = 200;
    for _ in 0..reps { gemm_acc(&mut c, &a, &b, Trans::NN); }
    let dt = t0.elapsed().as_secs_f64() / reps as f64;
    println!("(4000x128)x(128x128): {:.3} ms -> {:.1} GFLOP/s", dt*1e3, 2.0*4000.0*128.0*128.0/dt/1e9);

    // transposed accumulation as in backward dW = X^T G
    let x = Matrix::zeros(4000, 128);
    let g = Matrix::zeros(4000, 128);
    let mut dw = Matrix::zeros(128, 128);
    let t0 = Instant::now();
    for _ in 0..reps { gemm_acc(&mut dw, &x, &g, Trans::TN); }
    let dt = t0.elapsed().as_secs_f64() / reps as f64;
    println!("TN (128x4000)x(4000x128): {:.3} ms -> {:.1} GFLOP/s", dt*1e3, 2.0*4000.0*128.0*128.0/dt/1e9);

    // small K outer product: (4000x1)x(1x128)
    let t = Matrix::zeros(4000, 1);
    let w = Matrix::zeros(1, 128);
    let mut o = Matrix::zeros(4000, 128);
    let t0 = Instant::now();
    for _ in 0..reps { gemm_acc(&mut o, &t, &w, Trans::NN); }
    let dt = t0.elapsed().as_secs_f64() / reps as f64;
    println!("outer (4000x1)x(1x128): {:.3} ms", dt*1e3);
}
