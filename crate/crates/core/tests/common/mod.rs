//! Helpers shared by the integration tests: seeded inputs, a direct-loop
//! reference forward pass and reference loss formulas written independently
//! of the library.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stylecl::model::SegModel;
use stylecl::numerics::Tensor3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor3<f32> {
    let data = (0..h * w * 3).map(|_| rng.random::<f32>()).collect();
    Tensor3::from_vec(h, w, 3, data).unwrap()
}

/// Random probability rows (`pixels x c`), each summing to one.
pub fn random_probs(rng: &mut ChaCha8Rng, pixels: usize, c: usize, sharpness: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(pixels * c);
    for _ in 0..pixels {
        let row: Vec<f64> = (0..c)
            .map(|_| (sharpness * rng.random_range(-1.0..1.0f64)).exp())
            .collect();
        let s: f64 = row.iter().sum();
        out.extend(row.iter().map(|v| v / s));
    }
    out
}

/// ReLU gates of both hidden layers, `h*w*F` each.
pub type Gates = (Vec<bool>, Vec<bool>);

/// Logits by direct summation. With `frozen` set, each ReLU passes its input
/// exactly where the stored gate is open, which keeps the map smooth in the
/// parameters for finite differencing.
pub fn reference_logits(
    m: &SegModel<f64>,
    img: &Tensor3<f64>,
    frozen: Option<&Gates>,
) -> (Vec<f64>, Gates) {
    let (h, w) = (img.height(), img.width());
    let f = m.features();
    let p = m.params();
    let conv = |input: &[f64], cin: usize, wt: &[f64], b: &[f64], gate: Option<&Vec<bool>>| {
        let mut out = vec![0.0; h * w * f];
        let mut mask = vec![false; h * w * f];
        for y in 0..h {
            for x in 0..w {
                for o in 0..f {
                    let mut z = b[o];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (sy, sx) =
                                (y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            let src = (sy as usize * w + sx as usize) * cin;
                            for ci in 0..cin {
                                z += wt[o * 9 * cin + (ky * 3 + kx) * cin + ci] * input[src + ci];
                            }
                        }
                    }
                    let i = (y * w + x) * f + o;
                    mask[i] = z > 0.0;
                    if gate.map_or(mask[i], |g| g[i]) {
                        out[i] = z;
                    }
                }
            }
        }
        (out, mask)
    };
    let (a1, g1) = conv(img.data(), 3, &p.conv1_w, &p.conv1_b, frozen.map(|g| &g.0));
    let (a2, g2) = conv(&a1, f, &p.conv2_w, &p.conv2_b, frozen.map(|g| &g.1));
    let c = m.num_classes();
    let mut logits = vec![0.0; h * w * c];
    for px in 0..h * w {
        for k in 0..c {
            let mut z = p.head_b[k];
            for j in 0..f {
                z += p.head_w[k * f + j] * a2[px * f + j];
            }
            logits[px * c + k] = z;
        }
    }
    (logits, (g1, g2))
}

/// Per-pixel log of the summed probability of each channel group.
pub fn grouped_log_probs(logits: &[f64], c: usize, groups: &[Vec<usize>]) -> Vec<Vec<f64>> {
    logits
        .chunks_exact(c)
        .map(|row| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            groups
                .iter()
                .map(|g| (g.iter().map(|&i| (row[i] - max).exp()).sum::<f64>() / z).ln())
                .collect()
        })
        .collect()
}

/// Mean negative log-likelihood over pixels whose label is not `ignore`.
/// Labels index the groups.
pub fn nll(glp: &[Vec<f64>], labels: &[Option<usize>]) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for (row, l) in glp.iter().zip(labels) {
        if let Some(j) = l {
            sum -= row[*j];
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Mean over pixels of the soft cross-entropy against `target` rows.
pub fn soft_ce(glp: &[Vec<f64>], target: &[f64]) -> f64 {
    let g = glp[0].len();
    glp.iter()
        .zip(target.chunks_exact(g))
        .map(|(row, t)| -row.iter().zip(t).map(|(a, b)| a * b).sum::<f64>())
        .sum::<f64>()
        / glp.len() as f64
}
