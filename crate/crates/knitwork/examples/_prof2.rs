use knitwork::encoding::{CoordinateBatch, FourierEncoding};
use knitwork::losses::*;
use knitwork::nets::*;
use knitwork::patching::*;
use knitwork::synth;
use knitwork::Tensor;
use rand::SeedableRng;
use std::time::Instant;

fn ms(t: Instant) -> f64 { t.elapsed().as_secs_f64() * 1e3 }

fn main() {
    let img = synth::natural_texture(64, 64, 3, 1);
    let spec = PatchSpec::default();
    let ex = PatchExtractor::new(&img, &spec).unwrap();
    let enc = FourierEncoding::new(128, 10.0, 0).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let cfg = NetConfig::new(256, 81, 3);
    let patch = PatchMlp::new(&cfg, &mut rng);
    let recon = Reconstructor::new(&cfg, &mut rng);
    let disc = PatchDiscriminator::new(&cfg, &mut rng);
    let shifts = ShiftMap::build(&spec);

    let reps = 20;
    let mut stage = vec![0.0; 8];
    for _ in 0..reps {
        let batch = knitwork::trainer::sample_batch(64, 64, 128, &mut rng).unwrap();
        let t = Instant::now();
        let feats = enc.encode(&batch).unwrap();
        let stacks = patch.forward(&feats).unwrap();
        stage[0] += ms(t);

        let t = Instant::now();
        let truth = ex.stacks_for_batch(&batch).unwrap();
        let mask = mask_stacks_for_batch(None, &batch, &spec, 3).unwrap();
        let l_recon = patch_recon_loss(&stacks, &truth, &mask).unwrap();
        stage[1] += ms(t);

        // partner forward: 4 groups merged
        let t = Instant::now();
        let entries: Vec<_> = shifts.non_center_entries().take(4).copied().collect();
        let mut idx = Vec::new();
        for e in &entries {
            for &(y, x) in &batch.pixel_indices {
                let py = (y as i64 - e.shift.0).clamp(0, 63) as usize;
                let px = (x as i64 - e.shift.1).clamp(0, 63) as usize;
                idx.push((py, px));
            }
        }
        let partners = CoordinateBatch::from_indices(64, 64, idx).unwrap_or_else(|_| CoordinateBatch::full_grid(16, 32));
        let pf = enc.encode(&partners).unwrap();
        let pstacks = patch.forward(&pf).unwrap();
        stage[2] += ms(t);

        let t = Instant::now();
        let centers = pstacks.slice_cols(4 * 3, 3).unwrap();
        let mut l_x = Tensor::scalar(0.0);
        for (gi, e) in entries.iter().enumerate() {
            let pc = centers.slice_rows(gi * 128, 128).unwrap();
            let elem = stacks.slice_cols(e.elem * 3, 3).unwrap();
            l_x = l_x.add(&elem.sub(&pc).unwrap().square().sum()).unwrap();
        }
        stage[3] += ms(t);

        let t = Instant::now();
        let colors = recon.forward(&stacks).unwrap();
        let target = Tensor::from_vec(vec![128, 3], vec![0.5; 384]).unwrap();
        let l_pix = pixel_loss(&colors, &target, None).unwrap();
        let scores = disc.forward(&stacks).unwrap();
        let l_gen = gen_adv_loss(&scores, GanForm::NonSaturating);
        stage[4] += ms(t);

        let t = Instant::now();
        let parts = GeneratorParts { recon: l_recon, xpatch: l_x, pixel: l_pix, gen_bce: l_gen, down: None };
        let (total, _) = total_generator_loss(&parts, &LossWeights::default()).unwrap();
        stage[5] += ms(t);

        let t = Instant::now();
        for p in patch.params().iter().chain(recon.params().iter()).chain(disc.params().iter()) { p.zero_grad(); }
        total.backward().unwrap();
        stage[6] += ms(t);

        let t = Instant::now();
        let mut all = patch.params(); all.extend(recon.params());
        let mut adam = knitwork::AdamState::new(&all, 1e-4);
        adam.step(&all).unwrap();
        stage[7] += ms(t);
    }
    let names = ["encode+fwd(128)", "truth+mask+recon_loss", "partner enc+fwd(512)", "xpatch assemble", "recon+disc fwd", "total", "backward", "adam"];
    for (n, s) in names.iter().zip(&stage) {
        println!("{n:>24}: {:.2} ms", s / reps as f64);
    }
}
