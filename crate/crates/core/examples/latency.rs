//! Full-width forward latency. `cargo run --release --example latency [blocks]`
use std::time::Instant;

use inclg_core::graph::Graph;
use inclg_core::model::{Generator, ModelConfig};
use inclg_core::tensor::Tensor;
use inclg_core::types::BinaryMask;
use rand::SeedableRng;

fn main() {
    inclg_core::alloc::retain_freed_memory();
    let blocks: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(4);
    let cfg = ModelConfig { residual_blocks: blocks, ..ModelConfig::full() };
    let gen = Generator::new(cfg).unwrap();
    let store = gen.init_params::<f32>(&mut rand_chacha::ChaCha8Rng::seed_from_u64(0));
    let img = Tensor::full(&[1, 3, 256, 256], 0.5f32);
    let mask = BinaryMask::from_fn(256, 256, |x, y| x > 80 && x < 180 && y > 150 && y < 220);
    let mut times: Vec<f64> = (0..5)
        .map(|_| {
            let t = Instant::now();
            let mut g = Graph::new();
            let out = gen.forward(&mut g, &store, &img, std::slice::from_ref(&mask)).unwrap();
            let _ = g.value(out.image);
            t.elapsed().as_secs_f64()
        })
        .collect();
    times.sort_by(f64::total_cmp);
    println!("blocks={blocks} forward median {:.3}s min {:.3}s max {:.3}s", times[2], times[0], times[4]);
}
