use knitwork::imageio::ImageGrid;
use knitwork::metrics::psnr;
use knitwork::synth;
use knitwork::trainer::{fit, TaskContext, TrainConfig};
use std::time::Instant;

fn texture_for_fit(seed: u64) -> ImageGrid {
    let base = synth::natural_texture(64, 64, 3, seed);
    knitwork::patching::gaussian_blur(&base, 0.8).unwrap()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let batch: usize = args[1].parse().unwrap();
    let k: usize = args[2].parse().unwrap();
    let iters: usize = args[3].parse().unwrap();
    let lr: f64 = args[4].parse().unwrap();
    let gamma: f64 = args[5].parse().unwrap();
    let lrd: f64 = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(lr);
    let img = texture_for_fit(401);
    let mut cfg = TrainConfig {
        iterations: iters,
        batch_size: batch,
        xpatch_samples: k,
        lr_g: lr,
        lr_d: lrd,
        log_every: 0,
        ..TrainConfig::default()
    };
    cfg.weights.gamma = gamma;
    if gamma == 0.0 {
        cfg.adversarial = false;
    }
    if std::env::var("BASELINE").is_ok() {
        cfg.patch_output = false;
        cfg.adversarial = false;
        cfg.xpatch_loss = false;
    }
    let t0 = Instant::now();
    let state = fit(TaskContext::Fit { image: img.clone() }, cfg).unwrap();
    let out = state.render().unwrap();
    let p = psnr(&img, &out, None).unwrap();
    println!(
        "RESULT b={batch} k={k} it={iters} lr={lr} g={gamma} lrd={lrd}: {:.2} dB, {:.0}s",
        p,
        t0.elapsed().as_secs_f64()
    );
}
