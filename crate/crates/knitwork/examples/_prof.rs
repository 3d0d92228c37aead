use knitwork::synth;
use knitwork::trainer::{fit, TaskContext, TrainConfig};
use std::time::Instant;

fn main() {
    for (batch, k, label) in [(128usize, 4usize, "b128 k4"), (96, 3, "b96 k3"), (192, 4, "b192 k4")] {
        let img = synth::natural_texture(64, 64, 3, 1);
        let cfg = TrainConfig { iterations: 30, batch_size: batch, xpatch_samples: k, ..TrainConfig::default() };
        let t0 = Instant::now();
        let _ = fit(TaskContext::Fit { image: img }, cfg).unwrap();
        println!("acceptance-scale {label}: {:.1} ms/iter", t0.elapsed().as_secs_f64() * 1000.0 / 30.0);
    }
}
