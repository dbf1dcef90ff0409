// Per-op timing at desk-benchmark sizes.
use ndarray::{Array2, ArrayD, IxDyn};
use std::time::Instant;
use vddreg::nn::{bilinear_upsample_weights, Graph};

fn time<F: FnMut()>(label: &str, reps: usize, mut f: F) {
    let t0 = Instant::now();
    for _ in 0..reps {
        f();
    }
    println!("{label}: {:.3} ms", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);
}

fn main() {
    let size = 128usize;
    let x0 = ArrayD::from_elem(IxDyn(&[8, size, size]), 0.37);
    let w = ArrayD::from_elem(IxDyn(&[8, 8, 3, 3]), 0.01);
    let b = ArrayD::from_elem(IxDyn(&[8]), 0.0);

    time("conv2d 8->8 @128 fwd", 20, || {
        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let wn = g.param(w.clone());
        let bn = g.param(b.clone());
        let y = g.conv2d(x, wn, bn, 1);
        std::hint::black_box(g.value(y));
    });

    time("conv2d 8->8 @128 fwd+bwd", 20, || {
        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let wn = g.param(w.clone());
        let bn = g.param(b.clone());
        let y = g.conv2d(x, wn, bn, 1);
        let t = ArrayD::zeros(g.value(y).raw_dim());
        let l = g.mse_const(y, t);
        g.backward(l).unwrap();
    });

    time("relu @8x128x128", 100, || {
        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let y = g.relu(x);
        std::hint::black_box(g.value(y));
    });

    time("maxpool2 @8x128x128", 100, || {
        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let y = g.max_pool2(x);
        std::hint::black_box(g.value(y));
    });

    time("rot90 @8x128x128", 100, || {
        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let y = g.rot90(x, true);
        std::hint::black_box(g.value(y));
    });

    let wup8 = bilinear_upsample_weights(8, 8, 8);
    let x16 = ArrayD::from_elem(IxDyn(&[8, size / 8, size / 8]), 0.2);
    time("convT s8 8->8 (16->128) fwd", 20, || {
        let mut g = Graph::new();
        let x = g.param(x16.clone());
        let wn = g.param(wup8.clone());
        let bn = g.param(b.clone());
        let y = g.conv_transpose2d(x, wn, bn, 8);
        std::hint::black_box(g.value(y));
    });

    time("convT s8 fwd+bwd", 10, || {
        let mut g = Graph::new();
        let x = g.param(x16.clone());
        let wn = g.param(wup8.clone());
        let bn = g.param(b.clone());
        let y = g.conv_transpose2d(x, wn, bn, 8);
        let t = ArrayD::zeros(g.value(y).raw_dim());
        let l = g.mse_const(y, t);
        g.backward(l).unwrap();
    });

    let wup2 = bilinear_upsample_weights(8, 8, 2);
    let x64 = ArrayD::from_elem(IxDyn(&[8, size / 2, size / 2]), 0.2);
    time("convT s2 8->8 (64->128) fwd+bwd", 10, || {
        let mut g = Graph::new();
        let x = g.param(x64.clone());
        let wn = g.param(wup2.clone());
        let bn = g.param(b.clone());
        let y = g.conv_transpose2d(x, wn, bn, 2);
        let t = ArrayD::zeros(g.value(y).raw_dim());
        let l = g.mse_const(y, t);
        g.backward(l).unwrap();
    });

    // Gram on a 64x16x16 map
    let f = ArrayD::from_elem(IxDyn(&[64, 16, 16]), 0.3);
    time("gram 64x16x16 fwd+bwd", 50, || {
        let mut g = Graph::new();
        let x = g.param(f.clone());
        let gr = g.gram(x);
        let t = Array2::zeros((64, 64));
        let l = g.frobenius_sq_diff(gr, t);
        g.backward(l).unwrap();
    });

    // Param binding cost: 129k params cloned
    let params: Vec<ArrayD<f64>> = (0..40).map(|_| ArrayD::from_elem(IxDyn(&[60, 60]), 0.1)).collect();
    time("bind ~144k params", 100, || {
        let mut g = Graph::new();
        for p in &params {
            g.param(p.clone());
        }
        std::hint::black_box(&g);
    });
}
