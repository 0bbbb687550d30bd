//! Independent reference implementations shared by the oracle tests and the
//! acceptance report.
#![allow(dead_code)]

use fcformer::eval::GalleryIndex;
use fcformer::losses::{Reduction, TripletDistance, TripletSpec};
use fcformer::numerics::Tensor;
use image::{GrayImage, RgbImage};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// f32 results against f64 references: 1e-6, relative above magnitude 1.
pub fn close(got: f32, want: f64) -> bool {
    (got as f64 - want).abs() <= 1e-6 * want.abs().max(1.0)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], std: f32) -> Tensor {
    Tensor::randn(shape.to_vec(), std, rng)
}

/// Shuffled PK labels.
pub fn pk_labels(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let (p, k) = (rng.gen_range(2..6), rng.gen_range(2..5));
    let ids: Vec<usize> = (0..20).collect::<Vec<_>>().choose_multiple(rng, p).copied().collect();
    let mut labels: Vec<usize> = ids.iter().flat_map(|&i| std::iter::repeat(i).take(k)).collect();
    labels.shuffle(rng);
    labels
}

pub fn as_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn ce_reference(logits: &[f64], rows_per_label: usize, classes: usize, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    let mut rows = 0;
    for (i, &y) in labels.iter().enumerate() {
        for r in 0..rows_per_label {
            let start = (i * rows_per_label + r) * classes;
            let row = &logits[start..start + classes];
            total += log_sum_exp(row) - row[y];
            rows += 1;
        }
    }
    total / rows as f64
}

fn dist(a: &[f64], b: &[f64], kind: TripletDistance) -> f64 {
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    match kind {
        TripletDistance::Squared => sq,
        TripletDistance::Euclidean => sq.max(1e-12).sqrt(),
    }
}

/// Every pair examined; hardest positive is the farthest same-identity
/// candidate, hardest negative the nearest other-identity candidate.
pub fn exhaustive_triplet(
    anchor: &[f64],
    cand: &[f64],
    dim: usize,
    labels: &[usize],
    margin: f64,
    spec: TripletSpec,
) -> f64 {
    let b = labels.len();
    let mut sum = 0.0;
    for i in 0..b {
        let a = &anchor[i * dim..(i + 1) * dim];
        let mut hardest_pos = f64::NEG_INFINITY;
        let mut hardest_neg = f64::INFINITY;
        for j in 0..b {
            let d = dist(a, &cand[j * dim..(j + 1) * dim], spec.distance);
            if labels[j] == labels[i] {
                hardest_pos = hardest_pos.max(d);
            } else {
                hardest_neg = hardest_neg.min(d);
            }
        }
        sum += (hardest_pos - hardest_neg + margin).max(0.0);
    }
    match spec.reduction {
        Reduction::Sum => sum,
        Reduction::Mean => sum / b as f64,
    }
}

/// Mean over rows of KL(softmax(c) || softmax(h)).
pub fn kl_reference(c: &[f64], h: &[f64], classes: usize) -> f64 {
    let rows = c.len() / classes;
    let mut total = 0.0;
    for r in 0..rows {
        let (cr, hr) = (&c[r * classes..(r + 1) * classes], &h[r * classes..(r + 1) * classes]);
        let (lc, lh) = (log_sum_exp(cr), log_sum_exp(hr));
        for k in 0..classes {
            let log_p = cr[k] - lc;
            let log_q = hr[k] - lh;
            total += log_p.exp() * (log_p - log_q);
        }
    }
    total / rows as f64
}

/// Mean squared error over `rows` rows of `width` values.
pub fn mse_reference(x: &[f64], y: &[f64], rows: usize, width: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..rows {
        for k in 0..width {
            let d = x[i * width + k] - y[i * width + k];
            total += d * d;
        }
    }
    total / (rows * width) as f64
}

/// Sort-free retrieval reference: the rank of a gallery item is the number
/// of valid items strictly closer (or equally close with a smaller index).
/// Returns `(cmc, mAP, excluded queries)`.
pub fn retrieval_reference(q: &GalleryIndex, g: &GalleryIndex) -> (Vec<f64>, f64, usize) {
    let sim = |a: &[f32], b: &[f32]| -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
        let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot / (na * nb)
        }
    };
    let mut cmc = vec![0.0; g.len()];
    let (mut ap_total, mut n_eval, mut excluded) = (0.0, 0usize, 0usize);
    for i in 0..q.len() {
        let valid: Vec<usize> = (0..g.len())
            .filter(|&j| !(g.pids[j] == q.pids[i] && g.cams[j] == q.cams[i]))
            .collect();
        let dist: Vec<f64> = valid.iter().map(|&j| 1.0 - sim(q.row(i), g.row(j))).collect();
        let rank_of = |a: usize| -> usize {
            (0..valid.len())
                .filter(|&b| dist[b] < dist[a] || (dist[b] == dist[a] && valid[b] < valid[a]))
                .count()
                + 1
        };
        let mut hit_ranks: Vec<usize> = (0..valid.len())
            .filter(|&a| g.pids[valid[a]] == q.pids[i])
            .map(rank_of)
            .collect();
        if hit_ranks.is_empty() {
            excluded += 1;
            continue;
        }
        n_eval += 1;
        hit_ranks.sort_unstable();
        for (k, v) in cmc.iter_mut().enumerate() {
            if hit_ranks[0] <= k + 1 {
                *v += 1.0;
            }
        }
        let mut ap = 0.0;
        for &r in &hit_ranks {
            let relevant_up_to_r = hit_ranks.iter().filter(|&&s| s <= r).count();
            ap += relevant_up_to_r as f64 / r as f64;
        }
        ap_total += ap / hit_ranks.len() as f64;
    }
    cmc.iter_mut().for_each(|v| *v /= n_eval as f64);
    (cmc, ap_total / n_eval as f64, excluded)
}

pub fn random_index(rng: &mut ChaCha8Rng, n: usize, dim: usize, ids: usize, cams: usize) -> GalleryIndex {
    let features = (0..n * dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let pids = (0..n).map(|_| rng.gen_range(0..ids)).collect();
    let cams = (0..n).map(|_| rng.gen_range(0..cams)).collect();
    GalleryIndex::new(dim, features, pids, cams).unwrap()
}

/// Random query/gallery pair for retrieval config `config`; every fifth
/// gallery repeats its first row to force exact ties.
pub fn random_retrieval_case(rng: &mut ChaCha8Rng, config: usize) -> (GalleryIndex, GalleryIndex) {
    let dim = rng.gen_range(1..9);
    let ids = rng.gen_range(2..8);
    let cams = rng.gen_range(1..4);
    let n = rng.gen_range(5..40);
    let mut gallery = random_index(rng, n, dim, ids, cams);
    if config % 5 == 0 {
        let row = gallery.row(0).to_vec();
        gallery.features[dim..2 * dim].copy_from_slice(&row);
    }
    let n = rng.gen_range(1..15);
    (random_index(rng, n, dim, ids, cams), gallery)
}

/// Pixels outside the mask equal the holistic input and the mask is binary.
/// Returns the first offending pixel.
pub fn compositing_violation(holistic: &RgbImage, occluded: &RgbImage, mask: &GrayImage) -> Option<(u32, u32)> {
    mask.enumerate_pixels()
        .find(|(x, y, m)| {
            if m[0] == 0 {
                holistic.get_pixel(*x, *y) != occluded.get_pixel(*x, *y)
            } else {
                m[0] != 255
            }
        })
        .map(|(x, y, _)| (x, y))
}

pub fn touches_bottom(mask: &GrayImage) -> bool {
    let bottom = mask.height() - 1;
    (0..mask.width()).any(|x| mask.get_pixel(x, bottom)[0] != 0)
}
