//! Binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  "NKWK"
//! u32    format version (1)
//! [u8;32] SHA-256 digest of the canonical trainer config
//! u32    network count
//!   per network: u32 name length, name bytes,
//!                u32 parameter count,
//!                per parameter: u32 ndim, u32 dims…, f64 data…
//! u8     has generator optimizer state
//!   u64 step count, then per parameter: f64 first moments…, f64 second moments…
//! u8     has discriminator optimizer state (same layout)
//! u64    trainer step
//! [u8;32] rng seed, u128 rng word position
//! ```
//!
//! Parameters are raw f64 bit patterns, so save→load→save round-trips are
//! byte-identical and restored training continues bit-for-bit on the same
//! platform.

use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{KnitworkError, Result};
use crate::tensor::{AdamState, Tensor};
use crate::trainer::{TrainConfig, TrainState};

const MAGIC: &[u8; 4] = b"NKWK";
const VERSION: u32 = 1;

/// Canonical string of every config field that shapes the training
/// trajectory (run length and output plumbing excluded so a run can be
/// resumed past its original iteration budget).
pub fn canonical_config(cfg: &TrainConfig) -> String {
    format!(
        "alpha={};beta={};gamma={};delta={};lr_g={};lr_d={};batch={};d_steps={};seed={};\
         p={};scales={:?};blur={:?};m={};sigma_pe={};hidden={};recon={};disc={};slope={};\
         patch={};xpatch={};adv={};gan={:?};smooth={};xsamp={};srpix={}",
        cfg.weights.alpha, cfg.weights.beta, cfg.weights.gamma, cfg.weights.delta,
        cfg.lr_g, cfg.lr_d, cfg.batch_size, cfg.d_steps_per_g, cfg.seed,
        cfg.patch_spec.patch_size, cfg.patch_spec.scales, cfg.patch_spec.blur_sigma_per_scale,
        cfg.num_frequencies, cfg.sigma_pe, cfg.hidden_width, cfg.recon_width, cfg.disc_width,
        cfg.leaky_slope, cfg.patch_output, cfg.xpatch_loss, cfg.adversarial, cfg.gan_form,
        cfg.label_smoothing, cfg.xpatch_samples, cfg.sr_pixel_supervision
    )
}

pub fn config_digest(cfg: &TrainConfig) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(canonical_config(cfg).as_bytes());
    hasher.finalize().into()
}

fn named_nets(state: &TrainState) -> Vec<(&'static str, Vec<Tensor>)> {
    let mut out = Vec::new();
    if let Some(n) = &state.nets.patch_mlp {
        out.push(("patch_mlp", n.params()));
    }
    if let Some(n) = &state.nets.reconstructor {
        out.push(("reconstructor", n.params()));
    }
    if let Some(n) = &state.nets.discriminator {
        out.push(("discriminator", n.params()));
    }
    if let Some(n) = &state.nets.baseline {
        out.push(("baseline", n.params()));
    }
    if let Some(n) = &state.nets.kernel {
        out.push(("kernel", n.params()));
    }
    out
}

struct Writer<W: Write> {
    out: W,
}

impl<W: Write> Writer<W> {
    fn bytes(&mut self, b: &[u8]) -> std::io::Result<()> {
        self.out.write_all(b)
    }
    fn u32(&mut self, v: u32) -> std::io::Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn u64(&mut self, v: u64) -> std::io::Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn f64s(&mut self, v: &[f64]) -> std::io::Result<()> {
        for x in v {
            self.bytes(&x.to_le_bytes())?;
        }
        Ok(())
    }
    fn adam(&mut self, adam: &AdamState) -> std::io::Result<()> {
        self.u64(adam.step_count)?;
        for (m, v) in adam.first_moment.iter().zip(&adam.second_moment) {
            self.f64s(m)?;
            self.f64s(v)?;
        }
        Ok(())
    }
}

/// Writes the full training state (networks, optimizers, step, rng).
pub fn save(path: &Path, state: &TrainState) -> Result<()> {
    let io_err = |source| KnitworkError::Io { path: path.to_path_buf(), source };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err)?;
    }
    let file = std::fs::File::create(path).map_err(io_err)?;
    let mut w = Writer { out: std::io::BufWriter::new(file) };
    (|| -> std::io::Result<()> {
        w.bytes(MAGIC)?;
        w.u32(VERSION)?;
        w.bytes(&config_digest(&state.config))?;

        let nets = named_nets(state);
        w.u32(nets.len() as u32)?;
        for (name, params) in &nets {
            w.u32(name.len() as u32)?;
            w.bytes(name.as_bytes())?;
            w.u32(params.len() as u32)?;
            for p in params {
                let shape = p.shape();
                w.u32(shape.len() as u32)?;
                for d in &shape {
                    w.u32(*d as u32)?;
                }
                w.f64s(&p.data())?;
            }
        }

        w.bytes(&[1])?;
        w.adam(&state.adam_g)?;
        match &state.adam_d {
            Some(d) => {
                w.bytes(&[1])?;
                w.adam(d)?;
            }
            None => w.bytes(&[0])?,
        }

        w.u64(state.step)?;
        w.bytes(&state.rng.get_seed())?;
        w.bytes(&state.rng.get_word_pos().to_le_bytes())?;
        w.out.flush()
    })()
    .map_err(io_err)
}

struct Reader<R: Read> {
    inp: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> std::io::Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inp.read_exact(&mut buf)?;
        Ok(buf)
    }
    fn u32(&mut self) -> std::io::Result<u32> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> std::io::Result<u64> {
        let b = self.bytes(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
    fn f64s(&mut self, n: usize) -> std::io::Result<Vec<f64>> {
        let raw = self.bytes(n * 8)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

fn restore_adam<R: Read>(r: &mut Reader<R>, adam: &mut AdamState, params: &[Tensor]) -> Result<()> {
    let step = r.u64().map_err(read_err)?;
    adam.step_count = step;
    for (i, p) in params.iter().enumerate() {
        let n = p.numel();
        adam.first_moment[i] = r.f64s(n).map_err(read_err)?;
        adam.second_moment[i] = r.f64s(n).map_err(read_err)?;
    }
    Ok(())
}

fn read_err(source: std::io::Error) -> KnitworkError {
    KnitworkError::Checkpoint(format!("truncated or unreadable checkpoint: {source}"))
}

/// Restores a checkpoint into a freshly constructed state for the same task
/// and config. Verifies the magic, version and config digest, then overwrites
/// parameters, optimizer moments, the step counter and the RNG position so
/// continued training is bit-identical to an uninterrupted run.
pub fn restore_into(path: &Path, state: &mut TrainState) -> Result<()> {
    let file = std::fs::File::open(path).map_err(|source| KnitworkError::Io { path: path.to_path_buf(), source })?;
    let mut r = Reader { inp: std::io::BufReader::new(file) };

    if r.bytes(4).map_err(read_err)? != MAGIC {
        return Err(KnitworkError::Checkpoint("bad magic (not a knitwork checkpoint)".to_string()));
    }
    let version = r.u32().map_err(read_err)?;
    if version != VERSION {
        return Err(KnitworkError::Checkpoint(format!("unsupported version {version}")));
    }
    let digest = r.bytes(32).map_err(read_err)?;
    if digest != config_digest(&state.config) {
        return Err(KnitworkError::Checkpoint(
            "config digest mismatch: checkpoint was written under a different configuration".to_string(),
        ));
    }

    let nets = named_nets(state);
    let count = r.u32().map_err(read_err)? as usize;
    if count != nets.len() {
        return Err(KnitworkError::Checkpoint(format!("expected {} networks, found {count}", nets.len())));
    }
    for (name, params) in &nets {
        let name_len = r.u32().map_err(read_err)? as usize;
        let got_name = String::from_utf8(r.bytes(name_len).map_err(read_err)?)
            .map_err(|_| KnitworkError::Checkpoint("bad network name".to_string()))?;
        if got_name != *name {
            return Err(KnitworkError::Checkpoint(format!("expected network '{name}', found '{got_name}'")));
        }
        let pcount = r.u32().map_err(read_err)? as usize;
        if pcount != params.len() {
            return Err(KnitworkError::Checkpoint(format!("network '{name}': parameter count mismatch")));
        }
        for p in params {
            let ndim = r.u32().map_err(read_err)? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.u32().map_err(read_err)? as usize);
            }
            if dims != p.shape() {
                return Err(KnitworkError::Checkpoint(format!(
                    "network '{name}': shape {dims:?} does not match expected {:?}",
                    p.shape()
                )));
            }
            let data = r.f64s(p.numel()).map_err(read_err)?;
            p.set_data(&data);
        }
    }

    if r.bytes(1).map_err(read_err)?[0] != 1 {
        return Err(KnitworkError::Checkpoint("missing generator optimizer state".to_string()));
    }
    let gen_params = state.nets.generator_params();
    let mut adam_g = state.adam_g.clone();
    restore_adam(&mut r, &mut adam_g, &gen_params)?;
    state.adam_g = adam_g;

    let has_d = r.bytes(1).map_err(read_err)?[0] == 1;
    match (has_d, state.adam_d.is_some()) {
        (true, true) => {
            let disc_params = state.nets.discriminator_params();
            let mut adam_d = state.adam_d.clone().expect("checked");
            restore_adam(&mut r, &mut adam_d, &disc_params)?;
            state.adam_d = Some(adam_d);
        }
        (false, false) => {}
        _ => return Err(KnitworkError::Checkpoint("discriminator state presence mismatch".to_string())),
    }

    state.step = r.u64().map_err(read_err)?;
    let seed: [u8; 32] = r.bytes(32).map_err(read_err)?.try_into().expect("32 bytes");
    let pos = u128::from_le_bytes(r.bytes(16).map_err(read_err)?.try_into().expect("16 bytes"));
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_word_pos(pos);
    state.rng = rng;
    Ok(())
}
