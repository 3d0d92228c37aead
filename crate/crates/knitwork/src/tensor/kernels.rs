//! Raw numeric kernels behind the tensor ops.
//!
//! Parallel splits use fixed chunk sizes so results are bit-identical for any
//! worker count on a given build.

use rayon::prelude::*;

/// Below this many multiply-adds the sequential path wins.
const PAR_FLOP_THRESHOLD: usize = 1 << 18;

/// Fixed row-chunk length for the transposed-A product reduction.
const TN_CHUNK: usize = 64;

/// C[m×n] = A[m×k] · B[k×n]
///
/// Processes four output rows per pass so each B row is loaded once per four
/// rows of A.
pub fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    matmul_nn_with_init(a, b, None, m, k, n)
}

/// C[m×n] = A[m×k] · B[k×n] + row-broadcast bias (a fused linear layer).
pub fn matmul_nn_bias(a: &[f64], b: &[f64], bias: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    matmul_nn_with_init(a, b, Some(bias), m, k, n)
}

fn matmul_nn_with_init(a: &[f64], b: &[f64], init: Option<&[f64]>, m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = match init {
        None => vec![0.0; m * n],
        Some(bias) => {
            let mut c = Vec::with_capacity(m * n);
            for _ in 0..m {
                c.extend_from_slice(bias);
            }
            c
        }
    };
    let block = |c_block: &mut [f64], a_block: &[f64]| {
        let rows = a_block.len() / k;
        match rows {
            4 => {
                let (c0, rest) = c_block.split_at_mut(n);
                let (c1, rest) = rest.split_at_mut(n);
                let (c2, c3) = rest.split_at_mut(n);
                for p in 0..k {
                    let (a0, a1, a2, a3) = (a_block[p], a_block[k + p], a_block[2 * k + p], a_block[3 * k + p]);
                    if a0 == 0.0 && a1 == 0.0 && a2 == 0.0 && a3 == 0.0 {
                        continue;
                    }
                    let b_row = &b[p * n..(p + 1) * n];
                    for j in 0..n {
                        let bv = b_row[j];
                        c0[j] += a0 * bv;
                        c1[j] += a1 * bv;
                        c2[j] += a2 * bv;
                        c3[j] += a3 * bv;
                    }
                }
            }
            _ => {
                for (c_row, a_row) in c_block.chunks_mut(n).zip(a_block.chunks(k)) {
                    for (p, &av) in a_row.iter().enumerate() {
                        if av == 0.0 {
                            continue;
                        }
                        let b_row = &b[p * n..(p + 1) * n];
                        for (cv, bv) in c_row.iter_mut().zip(b_row) {
                            *cv += av * bv;
                        }
                    }
                }
            }
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD && m >= 8 {
        c.par_chunks_mut(4 * n).zip(a.par_chunks(4 * k)).for_each(|(cb, ab)| block(cb, ab));
    } else {
        c.chunks_mut(4 * n).zip(a.chunks(4 * k)).for_each(|(cb, ab)| block(cb, ab));
    }
    c
}

/// C[m×k] = A[m×n] · B[k×n]ᵀ
///
/// B is transposed once so the product can run through the blocked
/// streaming kernel instead of serial dot products.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut bt = vec![0.0; n * k];
    for p in 0..k {
        for j in 0..n {
            bt[j * k + p] = b[p * n + j];
        }
    }
    matmul_nn(a, &bt, m, n, k)
}

/// C[k×n] = A[m×k]ᵀ · B[m×n]
///
/// Accumulated in fixed chunks over the shared m axis, partials combined in
/// chunk order.
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let chunk_partial = |range: std::ops::Range<usize>| -> Vec<f64> {
        let mut part = vec![0.0; k * n];
        let mut i = range.start;
        while i + 4 <= range.end {
            let a0 = &a[i * k..(i + 1) * k];
            let a1 = &a[(i + 1) * k..(i + 2) * k];
            let a2 = &a[(i + 2) * k..(i + 3) * k];
            let a3 = &a[(i + 3) * k..(i + 4) * k];
            let b0 = &b[i * n..(i + 1) * n];
            let b1 = &b[(i + 1) * n..(i + 2) * n];
            let b2 = &b[(i + 2) * n..(i + 3) * n];
            let b3 = &b[(i + 3) * n..(i + 4) * n];
            for p in 0..k {
                let (c0, c1, c2, c3) = (a0[p], a1[p], a2[p], a3[p]);
                if c0 == 0.0 && c1 == 0.0 && c2 == 0.0 && c3 == 0.0 {
                    continue;
                }
                let out_row = &mut part[p * n..(p + 1) * n];
                for j in 0..n {
                    out_row[j] += c0 * b0[j] + c1 * b1[j] + c2 * b2[j] + c3 * b3[j];
                }
            }
            i += 4;
        }
        for i in i..range.end {
            let a_row = &a[i * k..(i + 1) * k];
            let b_row = &b[i * n..(i + 1) * n];
            for (p, &av) in a_row.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let out_row = &mut part[p * n..(p + 1) * n];
                for (ov, bv) in out_row.iter_mut().zip(b_row) {
                    *ov += av * bv;
                }
            }
        }
        part
    };

    if m * k * n >= PAR_FLOP_THRESHOLD && m > TN_CHUNK {
        let ranges: Vec<_> = (0..m.div_ceil(TN_CHUNK))
            .map(|ci| ci * TN_CHUNK..((ci + 1) * TN_CHUNK).min(m))
            .collect();
        let partials: Vec<Vec<f64>> = ranges.into_par_iter().map(chunk_partial).collect();
        let mut c = vec![0.0; k * n];
        for part in partials {
            for (cv, pv) in c.iter_mut().zip(&part) {
                *cv += pv;
            }
        }
        c
    } else {
        chunk_partial(0..m)
    }
}

/// Symmetric (edge-inclusive mirror) index: …, 1, 0 | 0, 1, …, n-1 | n-1, n-2, …
fn sym_index(i: i64, len: usize) -> usize {
    let n = len as i64;
    let mut i = i;
    loop {
        if i < 0 {
            i = -1 - i;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Depthwise correlation of an `[h,w,c]` image with a `[kh,kw]` kernel,
/// symmetric padding, output the same size.
pub fn conv2d_depthwise(img: &[f64], h: usize, w: usize, c: usize, ker: &[f64], kh: usize, kw: usize) -> Vec<f64> {
    let (ry, rx) = ((kh / 2) as i64, (kw / 2) as i64);
    let mut out = vec![0.0; h * w * c];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let dst = ((y as usize) * w + x as usize) * c;
            for u in 0..kh as i64 {
                let sy = sym_index(y + u - ry, h);
                for v in 0..kw as i64 {
                    let sx = sym_index(x + v - rx, w);
                    let kv = ker[(u as usize) * kw + v as usize];
                    if kv == 0.0 {
                        continue;
                    }
                    let src = (sy * w + sx) * c;
                    for ch in 0..c {
                        out[dst + ch] += kv * img[src + ch];
                    }
                }
            }
        }
    }
    out
}

/// Gradient of `conv2d_depthwise` w.r.t. the image: scatter through the
/// padded taps.
pub fn conv2d_depthwise_grad_img(g: &[f64], h: usize, w: usize, c: usize, ker: &[f64], kh: usize, kw: usize) -> Vec<f64> {
    let (ry, rx) = ((kh / 2) as i64, (kw / 2) as i64);
    let mut dimg = vec![0.0; h * w * c];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let dst = ((y as usize) * w + x as usize) * c;
            for u in 0..kh as i64 {
                let sy = sym_index(y + u - ry, h);
                for v in 0..kw as i64 {
                    let sx = sym_index(x + v - rx, w);
                    let kv = ker[(u as usize) * kw + v as usize];
                    if kv == 0.0 {
                        continue;
                    }
                    let src = (sy * w + sx) * c;
                    for ch in 0..c {
                        dimg[src + ch] += kv * g[dst + ch];
                    }
                }
            }
        }
    }
    dimg
}

/// Gradient of `conv2d_depthwise` w.r.t. the kernel.
pub fn conv2d_depthwise_grad_kernel(g: &[f64], img: &[f64], h: usize, w: usize, c: usize, kh: usize, kw: usize) -> Vec<f64> {
    let (ry, rx) = ((kh / 2) as i64, (kw / 2) as i64);
    let mut dker = vec![0.0; kh * kw];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let dst = ((y as usize) * w + x as usize) * c;
            for u in 0..kh as i64 {
                let sy = sym_index(y + u - ry, h);
                for v in 0..kw as i64 {
                    let sx = sym_index(x + v - rx, w);
                    let src = (sy * w + sx) * c;
                    let mut s = 0.0;
                    for ch in 0..c {
                        s += img[src + ch] * g[dst + ch];
                    }
                    dker[(u as usize) * kw + v as usize] += s;
                }
            }
        }
    }
    dker
}
