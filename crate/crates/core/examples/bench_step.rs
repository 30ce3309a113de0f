//! Wall-time probe for one training step at the desk-scale configuration.

use fgsb_core::bridge::BridgeConfig;
use fgsb_core::dataset::SlicePair;
use fgsb_core::models::ModelConfig;
use fgsb_core::rng::{stream, SeedRng};
use fgsb_core::trainer::{train_step, TrainConfig, TrainState};
use ndarray::Array2;
use std::time::Instant;

fn main() {
    let canvas = 64usize;
    let mut rng = SeedRng::new(3, stream::EVAL);
    let pairs: Vec<SlicePair> = (0..4)
        .map(|i| {
            let source = Array2::from_shape_fn((canvas, canvas), |_| rng.normal().tanh() as f32);
            let target = source.mapv(|v| (v * 0.9).clamp(-1.0, 1.0));
            let mask = Array2::from_shape_fn((canvas, canvas), |(y, x)| {
                u8::from((y / 8 + x / 8) % 7 == 0)
            });
            SlicePair {
                source,
                target,
                prior_mask: Some(mask),
                subject_id: format!("s{i}"),
                slice_index: i as u32,
            }
        })
        .collect();

    let model = ModelConfig::default();
    let bridge = BridgeConfig::default();
    let cfg = TrainConfig { epochs: 10, seed: 7, ..Default::default() };
    let mut state = TrainState::new(&model, &bridge, &cfg).expect("state");
    println!(
        "model: ngf={} ndf={} ncf={} res={} params={}",
        model.ngf,
        model.ndf,
        model.ncf,
        model.n_res_blocks,
        state.store.ids().len()
    );

    // Warmup.
    train_step(&mut state, &[0], &pairs, 0, 0).expect("warmup");
    let n = 10;
    let start = Instant::now();
    for step in 0..n {
        train_step(&mut state, &[step % pairs.len()], &pairs, 0, step + 1).expect("step");
    }
    let dt = start.elapsed().as_secs_f64() / n as f64;
    println!("mean step time over {n} steps: {:.3} s", dt);
    println!("projected 200 epochs x 100 steps: {:.2} h", dt * 20_000.0 / 3600.0);
}
