//! Slow, direct reference implementations used to check the metric kernels.

use anonymizer_core::raster::Image;

pub fn psnr_naive(a: &Image, b: &Image) -> Option<f64> {
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for y in 0..a.height() {
        for x in 0..a.width() {
            let (p, q) = (a.get(x, y), b.get(x, y));
            for c in 0..3 {
                let d = p[c] as f64 - q[c] as f64;
                sum += d * d;
                n += 1;
            }
        }
    }
    if sum == 0.0 {
        None
    } else {
        Some(10.0 * (255.0 * 255.0 / (sum / n as f64)).log10())
    }
}

/// Sample mean and 1/(n−1) covariance with plain loops.
pub fn moments(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = rows.len();
    let d = rows[0].len();
    let mut mean = vec![0.0; d];
    for r in rows {
        for j in 0..d {
            mean[j] += r[j];
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![vec![0.0; d]; d];
    for r in rows {
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += (r[i] - mean[i]) * (r[j] - mean[j]);
            }
        }
    }
    for row in &mut cov {
        for v in row.iter_mut() {
            *v /= n as f64 - 1.0;
        }
    }
    (mean, cov)
}

fn similarity(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// (mAP, rank-k) by walking each query's full ranking position by position.
pub fn reid_naive(
    queries: &[(Vec<f32>, String)],
    gallery: &[(Vec<f32>, String)],
    ks: &[usize],
) -> (f64, Vec<f64>) {
    let mut ap_total = 0.0;
    let mut hits = vec![0usize; ks.len()];
    for (q, label) in queries {
        // selection sort: repeatedly take the most similar remaining item,
        // lowest index first on ties
        let mut remaining: Vec<usize> = (0..gallery.len()).collect();
        let mut order = Vec::new();
        while !remaining.is_empty() {
            let mut best = 0;
            for i in 1..remaining.len() {
                let (si, sb) = (1.0 - similarity(q, &gallery[remaining[i]].0), 1.0 - similarity(q, &gallery[remaining[best]].0));
                if si < sb {
                    best = i;
                }
            }
            order.push(remaining.remove(best));
        }
        let relevant_total = gallery.iter().filter(|g| &g.1 == label).count();
        let mut found = 0usize;
        let mut precision_sum = 0.0;
        let mut first_hit = None;
        for (pos, &g) in order.iter().enumerate() {
            if &gallery[g].1 == label {
                found += 1;
                precision_sum += found as f64 / (pos + 1) as f64;
                first_hit.get_or_insert(pos + 1);
            }
        }
        ap_total += precision_sum / relevant_total as f64;
        for (h, &k) in hits.iter_mut().zip(ks) {
            if first_hit.is_some_and(|r| r <= k) {
                *h += 1;
            }
        }
    }
    let nq = queries.len() as f64;
    (100.0 * ap_total / nq, hits.iter().map(|&h| 100.0 * h as f64 / nq).collect())
}
