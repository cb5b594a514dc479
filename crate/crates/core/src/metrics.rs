//! Retrieval evaluation and camera-bias measurements.
//!
//! Retrieval follows the standard cross-camera protocol: per query, gallery
//! entries sharing both person ID and camera ID are dropped before ranking,
//! queries without any remaining positive are skipped (and counted), AP is
//! the interpolation-free mean of precision at each positive's rank, and
//! CMC[r] is the fraction of valid queries with a positive in the top r.
//!
//! Camera bias is quantified as the normalized mutual information between a
//! seeded k-means clustering of the features and the camera labels; heavier
//! camera bias means clusters align with cameras and NMI rises.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::camnorm::CameraStats;
use crate::embedding_store::EmbeddingSet;
use crate::error::{Error, Result};
use crate::objective;
use crate::rng;
use crate::synth_bias::BiasSpec;

const STREAM_KMEANS: u64 = 0x30;

const KMEANS_MAX_ITER: usize = 300;
const KMEANS_TOL: f64 = 1e-6;

/// Per-camera retrieval summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerCameraReport {
    pub map: f64,
    pub rank1: f64,
    pub n_queries: usize,
}

/// Retrieval and bias metrics in one serializable record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub map_score: f64,
    /// CMC at ranks 1..=max_rank.
    pub cmc: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nmi_camera: Option<f64>,
    pub per_camera: BTreeMap<u32, PerCameraReport>,
    pub skipped_queries: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub curves: Option<CurveTable>,
    pub notes: Vec<String>,
}

/// How the per-query nearest-gallery statistic is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveMeasure {
    Euclidean,
    Cosine,
    /// Shannon entropy of the renormalized top-k soft-distance distribution;
    /// ranking (and therefore the error rate) stays Euclidean.
    EntropyProxy,
}

impl std::fmt::Display for CurveMeasure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CurveMeasure::Euclidean => write!(f, "euclidean"),
            CurveMeasure::Cosine => write!(f, "cosine"),
            CurveMeasure::EntropyProxy => write!(f, "entropy_proxy"),
        }
    }
}

/// Top-k/temperature settings for the entropy proxy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProxyConfig {
    pub k: usize,
    pub tau: f64,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        Self { k: 3, tau: 100.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveBin {
    pub bin: usize,
    pub mean_stat: f64,
    pub error_rate: f64,
    pub count: usize,
}

/// Equal-count binned error-rate curve for one measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveTable {
    pub measure: CurveMeasure,
    pub bins: Vec<CurveBin>,
}

/// Agreement between estimated and true bias parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecovery {
    pub hit_rate: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub hit_rate: f64,
    pub mae: f64,
    pub alpha: ParamRecovery,
    pub beta: ParamRecovery,
}

/// Ranks the gallery per query by ascending Euclidean distance and scores
/// mAP and CMC under the cross-camera protocol.
pub fn evaluate_retrieval(
    query: &EmbeddingSet,
    gallery: &EmbeddingSet,
    max_rank: usize,
) -> Result<EvalReport> {
    if gallery.is_empty() {
        return Err(Error::Config("gallery must not be empty".into()));
    }
    if max_rank == 0 {
        return Err(Error::Config("max_rank must be at least 1".into()));
    }
    if let Some(row) = query.pids().iter().position(|&p| p < 0) {
        return Err(Error::Label(format!(
            "query row {row} has unknown person id; labels are required for evaluation"
        )));
    }

    let max_rank = max_rank.min(gallery.len());
    let dists = objective::euclidean_distances(query.data().view(), gallery.data().view())?;

    let mut cmc_hits = vec![0usize; max_rank];
    let mut ap_sum = 0.0;
    let mut valid = 0usize;
    let mut skipped = 0usize;
    let mut per_camera: BTreeMap<u32, (f64, usize, usize)> = BTreeMap::new();

    for i in 0..query.len() {
        let q_pid = query.pids()[i];
        let q_cam = query.camids()[i];

        let mut order: Vec<usize> = (0..gallery.len()).collect();
        let row = dists.row(i);
        order.sort_by(|&a, &b| {
            row[a]
                .partial_cmp(&row[b])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });

        let mut rank = 0usize;
        let mut positives_seen = 0usize;
        let mut precision_sum = 0.0;
        let mut first_positive_rank = None;
        for &j in &order {
            // Same identity under the same camera is junk, not a candidate.
            if gallery.pids()[j] == q_pid && gallery.camids()[j] == q_cam {
                continue;
            }
            rank += 1;
            if gallery.pids()[j] == q_pid {
                positives_seen += 1;
                precision_sum += positives_seen as f64 / rank as f64;
                if first_positive_rank.is_none() {
                    first_positive_rank = Some(rank);
                }
            }
        }

        if positives_seen == 0 {
            skipped += 1;
            continue;
        }
        valid += 1;
        let ap = precision_sum / positives_seen as f64;
        ap_sum += ap;
        let first = first_positive_rank.expect("positive seen");
        if first <= max_rank {
            for slot in &mut cmc_hits[first - 1..] {
                *slot += 1;
            }
        }
        let entry = per_camera.entry(q_cam).or_insert((0.0, 0, 0));
        entry.0 += ap;
        entry.1 += usize::from(first == 1);
        entry.2 += 1;
    }

    let mut notes = Vec::new();
    if skipped > 0 {
        notes.push(format!(
            "{skipped} queries without cross-camera positives were skipped"
        ));
    }
    let denom = valid.max(1) as f64;
    Ok(EvalReport {
        map_score: ap_sum / denom,
        cmc: cmc_hits.iter().map(|&h| h as f64 / denom).collect(),
        nmi_camera: None,
        per_camera: per_camera
            .into_iter()
            .map(|(cam, (ap, r1, n))| {
                (
                    cam,
                    PerCameraReport {
                        map: ap / n as f64,
                        rank1: r1 as f64 / n as f64,
                        n_queries: n,
                    },
                )
            })
            .collect(),
        skipped_queries: skipped,
        curves: None,
        notes,
    })
}

/// Normalized mutual information between two label assignments, with
/// arithmetic-mean normalization `2·I/(H(U)+H(V))`; zero by convention when
/// either entropy is zero.
pub fn nmi_labels(u: &[usize], v: &[usize]) -> f64 {
    assert_eq!(u.len(), v.len(), "label vectors must align");
    let n = u.len();
    if n == 0 {
        return 0.0;
    }
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut cu: BTreeMap<usize, usize> = BTreeMap::new();
    let mut cv: BTreeMap<usize, usize> = BTreeMap::new();
    for (&a, &b) in u.iter().zip(v) {
        *joint.entry((a, b)).or_default() += 1;
        *cu.entry(a).or_default() += 1;
        *cv.entry(b).or_default() += 1;
    }
    let nf = n as f64;
    let entropy = |counts: &BTreeMap<usize, usize>| -> f64 {
        counts
            .values()
            .map(|&c| {
                let p = c as f64 / nf;
                -p * p.ln()
            })
            .sum()
    };
    let h_u = entropy(&cu);
    let h_v = entropy(&cv);
    if h_u == 0.0 || h_v == 0.0 {
        return 0.0;
    }
    let mut mi = 0.0;
    for (&(a, b), &c) in &joint {
        let p = c as f64 / nf;
        mi += p * (nf * c as f64 / (cu[&a] as f64 * cv[&b] as f64)).ln();
    }
    (2.0 * mi / (h_u + h_v)).clamp(0.0, 1.0)
}

/// Seeded k-means++ with Lloyd iterations; empty clusters are re-seeded from
/// the point farthest from its assigned centroid.
pub fn kmeans(data: &Array2<f64>, k: usize, seed: u64) -> Result<Vec<usize>> {
    let n = data.nrows();
    let d = data.ncols();
    if k == 0 || n < k {
        return Err(Error::Degenerate(format!(
            "cannot form {k} clusters from {n} points"
        )));
    }
    let distinct = {
        let mut rows: Vec<Vec<u64>> = data
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|v| v.to_bits()).collect())
            .collect();
        rows.sort();
        rows.dedup();
        rows.len()
    };
    if distinct < k {
        return Err(Error::Degenerate(format!(
            "only {distinct} distinct rows for {k} clusters"
        )));
    }

    let mut rng = rng::stream_rng(seed, STREAM_KMEANS);
    let sq_dist = |a: usize, centroid: &[f64]| -> f64 {
        (0..d).map(|t| (data[[a, t]] - centroid[t]).powi(2)).sum()
    };

    // k-means++ seeding.
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    let first = rng.random_range(0..n);
    centroids.push(data.row(first).to_vec());
    let mut best_d2: Vec<f64> = (0..n).map(|i| sq_dist(i, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = best_d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in best_d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.push(data.row(pick).to_vec());
        let latest = centroids.last().unwrap().clone();
        for (i, slot) in best_d2.iter_mut().enumerate() {
            let nd = sq_dist(i, &latest);
            if nd < *slot {
                *slot = nd;
            }
        }
    }

    let mut assignment = vec![0usize; n];
    for _ in 0..KMEANS_MAX_ITER {
        for (i, slot) in assignment.iter_mut().enumerate() {
            let mut best = 0usize;
            let mut best_dist = f64::INFINITY;
            for (c, centroid) in centroids.iter().enumerate() {
                let dist = sq_dist(i, centroid);
                if dist < best_dist {
                    best_dist = dist;
                    best = c;
                }
            }
            *slot = best;
        }

        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[assignment[i]] += 1;
            for t in 0..d {
                sums[assignment[i]][t] += data[[i, t]];
            }
        }
        // Re-seed empty clusters from the farthest point.
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let far = (0..n)
                .max_by(|&a, &b| {
                    let da = sq_dist(a, &centroids[assignment[a]]);
                    let db = sq_dist(b, &centroids[assignment[b]]);
                    da.partial_cmp(&db).unwrap_or(std::cmp::Ordering::Equal)
                })
                .expect("nonempty data");
            let old = assignment[far];
            counts[old] -= 1;
            for t in 0..d {
                sums[old][t] -= data[[far, t]];
            }
            assignment[far] = c;
            counts[c] = 1;
            for t in 0..d {
                sums[c][t] = data[[far, t]];
            }
        }

        let mut shift = 0.0;
        for c in 0..k {
            for t in 0..d {
                let new = sums[c][t] / counts[c] as f64;
                let diff = new - centroids[c][t];
                shift += diff * diff;
                centroids[c][t] = new;
            }
        }
        if shift <= KMEANS_TOL {
            break;
        }
    }

    // Final assignment against the converged centroids.
    for (i, slot) in assignment.iter_mut().enumerate() {
        let mut best = 0usize;
        let mut best_dist = f64::INFINITY;
        for (c, centroid) in centroids.iter().enumerate() {
            let dist = sq_dist(i, centroid);
            if dist < best_dist {
                best_dist = dist;
                best = c;
            }
        }
        *slot = best;
    }
    Ok(assignment)
}

/// NMI between a seeded k-means clustering of the features and the camera
/// labels. `n_clusters = None` uses the number of distinct cameras; a single
/// camera yields 0 by convention.
pub fn nmi_camera_bias(
    features: &EmbeddingSet,
    n_clusters: Option<usize>,
    seed: u64,
) -> Result<f64> {
    let distinct_cams = features.camera_ids().len();
    let k = match n_clusters {
        Some(k) => {
            if k < 2 {
                return Err(Error::Config("n_clusters must be at least 2".into()));
            }
            k
        }
        None => {
            if distinct_cams < 2 {
                return Ok(0.0);
            }
            distinct_cams
        }
    };
    if features.len() < k {
        return Err(Error::Degenerate(format!(
            "{} rows cannot form {k} clusters",
            features.len()
        )));
    }
    let clusters = kmeans(features.data(), k, seed)?;
    let cams: Vec<usize> = features.camids().iter().map(|&c| c as usize).collect();
    Ok(nmi_labels(&clusters, &cams))
}

/// Bins queries by a nearest-gallery statistic (equal-count bins) and
/// reports the top-1 error rate per bin.
pub fn error_rate_curve(
    query: &EmbeddingSet,
    gallery: &EmbeddingSet,
    measure: CurveMeasure,
    n_bins: usize,
    proxy: ProxyConfig,
) -> Result<CurveTable> {
    if gallery.is_empty() {
        return Err(Error::Config("gallery must not be empty".into()));
    }
    if n_bins == 0 {
        return Err(Error::Config("n_bins must be at least 1".into()));
    }
    if let Some(row) = query.pids().iter().position(|&p| p < 0) {
        return Err(Error::Label(format!(
            "query row {row} has unknown person id; labels are required"
        )));
    }

    let euclid = objective::euclidean_distances(query.data().view(), gallery.data().view())?;

    // Per valid query: (statistic, top-1 correct).
    let mut samples: Vec<(f64, bool, usize)> = Vec::new();
    for i in 0..query.len() {
        let q_pid = query.pids()[i];
        let q_cam = query.camids()[i];

        let kept: Vec<usize> = (0..gallery.len())
            .filter(|&j| !(gallery.pids()[j] == q_pid && gallery.camids()[j] == q_cam))
            .collect();
        if !kept.iter().any(|&j| gallery.pids()[j] == q_pid) {
            continue;
        }

        let ranking_dist = |j: usize| -> f64 {
            match measure {
                CurveMeasure::Euclidean | CurveMeasure::EntropyProxy => euclid[[i, j]],
                CurveMeasure::Cosine => cosine_distance(query, gallery, i, j),
            }
        };
        let nearest = *kept
            .iter()
            .min_by(|&&a, &&b| {
                ranking_dist(a)
                    .partial_cmp(&ranking_dist(b))
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            })
            .expect("kept is nonempty");
        let correct = gallery.pids()[nearest] == q_pid;

        let stat = match measure {
            CurveMeasure::Euclidean => euclid[[i, nearest]],
            CurveMeasure::Cosine => cosine_distance(query, gallery, i, nearest),
            CurveMeasure::EntropyProxy => {
                topk_soft_entropy(&euclid, i, &kept, proxy.k, proxy.tau)?
            }
        };
        samples.push((stat, correct, i));
    }

    if n_bins > samples.len() {
        return Err(Error::Degenerate(format!(
            "cannot form {n_bins} bins from {} valid queries",
            samples.len()
        )));
    }
    samples.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.2.cmp(&b.2))
    });

    let base = samples.len() / n_bins;
    let remainder = samples.len() % n_bins;
    let mut bins = Vec::with_capacity(n_bins);
    let mut cursor = 0usize;
    for b in 0..n_bins {
        let size = base + usize::from(b < remainder);
        let chunk = &samples[cursor..cursor + size];
        cursor += size;
        let mean_stat = chunk.iter().map(|s| s.0).sum::<f64>() / size as f64;
        let errors = chunk.iter().filter(|s| !s.1).count();
        bins.push(CurveBin {
            bin: b,
            mean_stat,
            error_rate: errors as f64 / size as f64,
            count: size,
        });
    }
    Ok(CurveTable { measure, bins })
}

fn cosine_distance(query: &EmbeddingSet, gallery: &EmbeddingSet, i: usize, j: usize) -> f64 {
    let q = query.data().row(i);
    let g = gallery.data().row(j);
    let dot: f64 = q.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
    let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(objective::NORM_FLOOR);
    let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt().max(objective::NORM_FLOOR);
    1.0 - dot / (qn * gn)
}

/// Shannon entropy of the renormalized top-k soft-distance distribution of
/// one query row, restricted to the kept gallery indices.
fn topk_soft_entropy(
    euclid: &Array2<f64>,
    row: usize,
    kept: &[usize],
    k: usize,
    tau: f64,
) -> Result<f64> {
    if !tau.is_finite() || tau <= 0.0 {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    let k_eff = k.max(1).min(kept.len());
    let mut order: Vec<usize> = kept.to_vec();
    order.sort_by(|&a, &b| {
        euclid[[row, a]]
            .partial_cmp(&euclid[[row, b]])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let top = &order[..k_eff];
    let min_d = euclid[[row, top[0]]];
    let weights: Vec<f64> = top
        .iter()
        .map(|&j| (-(euclid[[row, j]] - min_d) / tau).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    Ok(weights
        .iter()
        .map(|w| {
            let p = w / total;
            if p > 0.0 {
                -p * p.ln()
            } else {
                0.0
            }
        })
        .sum())
}

/// Compares estimated per-camera statistics against the true bias: the
/// query-side mean estimates the shift, the query-side scale estimates the
/// scale. A coordinate is a hit when its absolute error is below `threshold`.
pub fn bias_recovery(
    est: &CameraStats,
    truth: &BiasSpec,
    threshold: f64,
) -> Result<RecoveryReport> {
    if !threshold.is_finite() || threshold <= 0.0 {
        return Err(Error::Config("threshold must be positive".into()));
    }
    if est.query.cameras.keys().ne(truth.alphas.keys()) {
        return Err(Error::Config(
            "estimated and true camera key sets differ".into(),
        ));
    }

    let tally = |est_vals: &[f64], true_vals: &[f64]| -> Result<(usize, f64, usize)> {
        if est_vals.len() != true_vals.len() {
            return Err(Error::Config(format!(
                "dimension mismatch: {} vs {}",
                est_vals.len(),
                true_vals.len()
            )));
        }
        let mut hits = 0usize;
        let mut abs_err = 0.0;
        for (e, t) in est_vals.iter().zip(true_vals) {
            let err = (e - t).abs();
            abs_err += err;
            hits += usize::from(err < threshold);
        }
        Ok((hits, abs_err, est_vals.len()))
    };

    let mut alpha = (0usize, 0.0f64, 0usize);
    let mut beta = (0usize, 0.0f64, 0usize);
    for (cam, moments) in &est.query.cameras {
        let (h, e, n) = tally(&moments.scale, &truth.alphas[cam])?;
        alpha = (alpha.0 + h, alpha.1 + e, alpha.2 + n);
        let (h, e, n) = tally(&moments.mean, &truth.betas[cam])?;
        beta = (beta.0 + h, beta.1 + e, beta.2 + n);
    }

    let total = alpha.2 + beta.2;
    if total == 0 {
        return Err(Error::Config("no parameters to compare".into()));
    }
    let report = |(hits, err, n): (usize, f64, usize)| ParamRecovery {
        hit_rate: hits as f64 / n.max(1) as f64,
        mae: err / n.max(1) as f64,
    };
    Ok(RecoveryReport {
        hit_rate: (alpha.0 + beta.0) as f64 / total as f64,
        mae: (alpha.1 + beta.1) / total as f64,
        alpha: report(alpha),
        beta: report(beta),
    })
}

/// Spearman rank correlation (average ranks on ties).
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let rx = ranks(xs);
    let ry = ranks(ys);
    pearson(&rx, &ry)
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        values[a]
            .partial_cmp(&values[b])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            out[idx] = avg;
        }
        i = j + 1;
    }
    out
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}
