use std::time::Instant;
// Access internal kernels through a test shim: rebuild them here identically.
use rayon::prelude::*;

const PAR_FLOP_THRESHOLD: usize = 1 << 18;
const TN_CHUNK: usize = 64;

pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    let block = |c_block: &mut [f64], a_block: &[f64]| {
        let rows = a_block.len() / n;
        if rows == 4 {
            let (a0, a1) = (&a_block[..n], &a_block[n..2 * n]);
            let (a2, a3) = (&a_block[2 * n..3 * n], &a_block[3 * n..]);
            for p in 0..k {
                let b_row = &b[p * n..(p + 1) * n];
                let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
                for j in 0..n {
                    let bv = b_row[j];
                    s0 += a0[j] * bv; s1 += a1[j] * bv; s2 += a2[j] * bv; s3 += a3[j] * bv;
                }
                c_block[p] = s0; c_block[k + p] = s1; c_block[2 * k + p] = s2; c_block[3 * k + p] = s3;
            }
        } else {
            for (c_row, a_row) in c_block.chunks_mut(k).zip(a_block.chunks(n)) {
                for (p, cv) in c_row.iter_mut().enumerate() {
                    let b_row = &b[p * n..(p + 1) * n];
                    let mut s = 0.0;
                    for (av, bv) in a_row.iter().zip(b_row) { s += av * bv; }
                    *cv = s;
                }
            }
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD && m >= 8 {
        c.par_chunks_mut(4 * k).zip(a.par_chunks(4 * n)).for_each(|(cb, ab)| block(cb, ab));
    } else {
        c.chunks_mut(4 * k).zip(a.chunks(4 * n)).for_each(|(cb, ab)| block(cb, ab));
    }
    c
}

pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let chunk_partial = |range: std::ops::Range<usize>| -> Vec<f64> {
        let mut part = vec![0.0; k * n];
        for i in range {
            let a_row = &a[i * k..(i + 1) * k];
            let b_row = &b[i * n..(i + 1) * n];
            for (p, &av) in a_row.iter().enumerate() {
                if av == 0.0 { continue; }
                let out_row = &mut part[p * n..(p + 1) * n];
                for (ov, bv) in out_row.iter_mut().zip(b_row) { *ov += av * bv; }
            }
        }
        part
    };
    if m * k * n >= PAR_FLOP_THRESHOLD && m > TN_CHUNK {
        let ranges: Vec<_> = (0..m.div_ceil(TN_CHUNK)).map(|ci| ci * TN_CHUNK..((ci + 1) * TN_CHUNK).min(m)).collect();
        let partials: Vec<Vec<f64>> = ranges.into_par_iter().map(chunk_partial).collect();
        let mut c = vec![0.0; k * n];
        for part in partials {
            for (cv, pv) in c.iter_mut().zip(&part) { *cv += pv; }
        }
        c
    } else {
        chunk_partial(0..m)
    }
}

fn main() {
    let reps = 300;
    let (m, k, n) = (128usize, 256usize, 256usize);
    let g = vec![1.0f64; m * n];
    let b = vec![0.5f64; k * n];
    let a = vec![0.5f64; m * k];

    let t0 = Instant::now();
    for _ in 0..reps { let _ = matmul_nt(&g, &b, m, n, k); }
    println!("nt (dA): {:.3} ms", t0.elapsed().as_secs_f64()*1e3/reps as f64);

    let t0 = Instant::now();
    for _ in 0..reps { let _ = matmul_tn(&a, &g, m, k, n); }
    println!("tn (dB): {:.3} ms", t0.elapsed().as_secs_f64()*1e3/reps as f64);
}
