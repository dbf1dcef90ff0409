// Timing pilot: one stage-2-like training step at candidate canvas sizes.
use ndarray::Array2;
use std::time::Instant;
use vddreg::core::{BinaryMask, GrayImage, Modality, StyleTarget};
use vddreg::losses::{StyleLossConfig, TargetGrams};
use vddreg::nn::{Adam, Graph};
use vddreg::segmentation::{PerceptualBackbone, SegmentationNetwork};

fn main() {
    for size in [128usize, 160, 192] {
        let bb = PerceptualBackbone::small(1);
        let net_e = SegmentationNetwork::from_backbone(&bb, 8, 2);
        let net_o = net_e.clone_weights();
        let cfg = StyleLossConfig::for_backbone(&bb);
        let img_e = GrayImage::new(Array2::from_shape_fn((size, size), |(y,x)| ((x+y)%7) as f64/7.0), Modality::SynthA).unwrap();
        let img_o = GrayImage::new(Array2::from_shape_fn((size, size), |(y,x)| ((x*3+y)%5) as f64/5.0), Modality::SynthB).unwrap();
        let mask = BinaryMask::new(Array2::from_shape_fn((size, size), |(y,x)| ((x+y)%13 == 0) as u8)).unwrap();
        let target = StyleTarget::new(mask.clone(), "t");
        let targets = TargetGrams::compute(&bb, &target, &cfg).unwrap();

        let mut adam_e = Adam::new(1e-4, net_e.params());
        let mut net_e = net_e; let net_o = net_o;
        // stage-2 step
        let t0 = Instant::now();
        let n_steps = 3;
        for _ in 0..n_steps {
            let mut g = Graph::new();
            let ids_e = net_e.params().bind(&mut g, true);
            let ids_o = net_o.params().bind(&mut g, true);
            let nodes = vddreg::losses::stage2_loss_node(&mut g, &net_e, &ids_e, &net_o, &ids_o, &img_e, &img_o, &targets, &bb, &cfg).unwrap();
            g.backward(nodes.loss).unwrap();
            let grads: Vec<Option<&ndarray::ArrayD<f64>>> = ids_e.iter().map(|&id| g.grad(id)).collect();
            adam_e.step(net_e.params_mut(), &grads);
        }
        let dt = t0.elapsed().as_secs_f64() / n_steps as f64;
        println!("canvas {size}: stage-2 step {:.2}s -> 200ep x 15pairs = {:.1} min", dt, dt * 3000.0 / 60.0);

        // stage-1 step
        let t0 = Instant::now();
        for _ in 0..n_steps {
            let mut g = Graph::new();
            let ids = net_e.params().bind(&mut g, true);
            let nodes = vddreg::losses::stage1_loss_node(&mut g, &net_e, &ids, &img_e, &mask, &cfg).unwrap();
            g.backward(nodes.loss).unwrap();
            let grads: Vec<Option<&ndarray::ArrayD<f64>>> = ids.iter().map(|&id| g.grad(id)).collect();
            adam_e.step(net_e.params_mut(), &grads);
        }
        let dt = t0.elapsed().as_secs_f64() / n_steps as f64;
        println!("canvas {size}: stage-1 step {:.2}s -> 200ep x 3imgs = {:.1} min", dt, dt * 600.0 / 60.0);
    }
}
