use poselift::tensor::{accumulate_tn, matmul_nn, matmul_nt, Tensor};
use std::time::Instant;

fn main() {
    let b = 256; let k = 128; let o = 128;
    let x = Tensor::from_vec(&[b, k], (0..b*k).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let w = Tensor::from_vec(&[o, k], (0..o*k).map(|i| (i as f64 * 0.11).cos()).collect()).unwrap();
    let mut out = Tensor::zeros(&[b, o]);
    let reps = 200;
    let t = Instant::now();
    for _ in 0..reps { matmul_nt(&x, &w, &mut out); }
    let dt = t.elapsed().as_secs_f64();
    eprintln!("matmul_nt: {:.2} GFLOP/s", 2.0*(b*k*o) as f64*reps as f64/dt/1e9);

    let g = Tensor::from_vec(&[b, o], (0..b*o).map(|i| (i as f64 * 0.2).sin()).collect()).unwrap();
    let mut dx = Tensor::zeros(&[b, k]);
    let t = Instant::now();
    for _ in 0..reps { matmul_nn(&g, &w, &mut dx); }
    let dt = t.elapsed().as_secs_f64();
    eprintln!("matmul_nn: {:.2} GFLOP/s", 2.0*(b*k*o) as f64*reps as f64/dt/1e9);

    let mut dw = Tensor::zeros(&[o, k]);
    let t = Instant::now();
    for _ in 0..reps { accumulate_tn(&g, &x, &mut dw); }
    let dt = t.elapsed().as_secs_f64();
    eprintln!("accumulate_tn: {:.2} GFLOP/s", 2.0*(b*k*o) as f64*reps as f64/dt/1e9);
    eprintln!("sink {} {} {}", out.data()[0], dx.data()[0], dw.data()[0]);
}
