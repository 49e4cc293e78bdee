use microedit_core::rng::CounterRng;
use microedit_core::tensor::{matmul, matmul_nt, matmul_tn, transpose, Tensor};
use std::time::Instant;

fn main() {
    let mut rng = CounterRng::seed(1);
    let a = Tensor::new(vec![150, 128], (0..150*128).map(|_| rng.normal()).collect()).unwrap();
    let w = Tensor::new(vec![512, 128], (0..512*128).map(|_| rng.normal()).collect()).unwrap();
    let wt = transpose(&w); // [128, 512]
    let flops = 2.0 * 150.0 * 512.0 * 128.0;
    let reps = 300;

    let t0 = Instant::now();
    let mut sink = 0.0;
    for _ in 0..reps { sink += matmul_nt(&a, &w).unwrap().data()[0]; }
    println!("matmul_nt (row-dot): {:.2} GFLOP/s", reps as f64 * flops / t0.elapsed().as_secs_f64() / 1e9);

    let t0 = Instant::now();
    for _ in 0..reps { sink += matmul(&a, &wt).unwrap().data()[0]; }
    println!("matmul ikj (axpy):   {:.2} GFLOP/s", reps as f64 * flops / t0.elapsed().as_secs_f64() / 1e9);

    let t0 = Instant::now();
    for _ in 0..reps { let t = transpose(&w); sink += matmul(&a, &t).unwrap().data()[0]; }
    println!("transpose+matmul:    {:.2} GFLOP/s", reps as f64 * flops / t0.elapsed().as_secs_f64() / 1e9);

    let t0 = Instant::now();
    for _ in 0..reps { sink += matmul_tn(&wt, &transpose(&a)).unwrap().data()[0]; }
    println!("matmul_tn (axpy):    {:.2} GFLOP/s (sink {sink:.1})", reps as f64 * flops / t0.elapsed().as_secs_f64() / 1e9);
}
