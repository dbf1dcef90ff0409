// Where does a training step spend its time?
use ndarray::{Array2, Array3};
use vddreg as _;
use std::time::Instant;

fn main() {
    // Raw GEMM benchmark roughly matching the encoder's biggest matmuls.
    for (m, k, n) in [(8usize, 72usize, 16384usize), (16, 144, 4096), (32, 288, 1024), (64, 576, 256)] {
        let a = Array2::<f64>::from_elem((m, k), 1.01);
        let b = Array2::<f64>::from_elem((k, n), 0.99);
        let t0 = Instant::now();
        let reps = 50;
        for _ in 0..reps {
            let c = a.dot(&b);
            std::hint::black_box(&c);
        }
        let dt = t0.elapsed().as_secs_f64() / reps as f64;
        let gflops = 2.0 * (m * k * n) as f64 / dt / 1e9;
        println!("gemm {m}x{k}x{n}: {:.3} ms, {gflops:.1} GFLOP/s", dt * 1e3);
    }

    // im2col-ish memory traffic benchmark
    let x = Array3::<f64>::from_elem((8, 128, 128), 0.5);
    let t0 = Instant::now();
    let reps = 50;
    for _ in 0..reps {
        let mut cols = Array2::<f64>::zeros((8 * 9, 128 * 128));
        for ci in 0..8 {
            for d in 0..9 {
                let row = ci * 9 + d;
                let mut r = cols.row_mut(row);
                let rs = r.as_slice_mut().unwrap();
                for y in 0..126 {
                    let src = x.slice(ndarray::s![ci, y, 0..126]);
                    rs[y * 128..y * 128 + 126].copy_from_slice(src.as_slice().unwrap());
                }
            }
        }
        std::hint::black_box(&cols);
    }
    println!("im2col-ish (8ch 128x128 k3): {:.3} ms", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);
}
