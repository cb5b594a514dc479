//! Distance-based adaptation objectives and their analytic gradients.
//!
//! The primary loss turns the query-to-gallery Euclidean distance matrix
//! into a row-softmax "soft distance" `H = d/τ + logsumexp(−d/τ)`, selects
//! the k smallest entries per row, and averages the selected values over the
//! batch. Gradients treat the top-k selection as constant (the indicator is
//! piecewise constant) and chain through the per-camera scale-shift, giving
//! exact derivatives for the learnable mean and scale vectors.
//!
//! A cosine-similarity entropy objective is provided as a baseline: per row,
//! the softmax entropy of the k largest cosine similarities.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};

use crate::camnorm::CameraMoments;
use crate::error::{Error, Result};

/// Floor on distances inside gradient ratios, avoiding 0/0 at coincident
/// points where the distance derivative is undefined.
pub const DIST_FLOOR: f64 = 1e-12;

/// Floor on vector norms in the cosine objective.
pub const NORM_FLOOR: f64 = 1e-12;

/// Everything the loss computes, kept for diagnostics and tests.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub loss: f64,
    /// B×N_g Euclidean distances.
    pub distances: Array2<f64>,
    /// B×N_g soft distances `H`.
    pub soft: Array2<f64>,
    /// B×N_g 0/1 top-k selection.
    pub mask: Array2<u8>,
    /// Selected gallery indices per row, ascending.
    pub row_topk_indices: Vec<Vec<usize>>,
}

/// Loss gradients with respect to the scaled-shifted batch and the
/// per-camera external parameters. Cameras absent from the batch are absent
/// from the maps.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub d_zhat: Array2<f64>,
    pub d_mean: BTreeMap<u32, Vec<f64>>,
    pub d_scale: BTreeMap<u32, Vec<f64>>,
}

/// Pairwise Euclidean distances between the rows of `a` and the rows of `g`.
///
/// Computed as an explicit per-pair sum of squares, so identical rows give a
/// distance of exactly zero.
pub fn euclidean_distances(a: ArrayView2<f64>, g: ArrayView2<f64>) -> Result<Array2<f64>> {
    if a.ncols() != g.ncols() {
        return Err(Error::Shape(format!(
            "dimension mismatch: {} vs {}",
            a.ncols(),
            g.ncols()
        )));
    }
    let mut out = Array2::<f64>::zeros((a.nrows(), g.nrows()));
    for (i, ai) in a.rows().into_iter().enumerate() {
        let ai = ai.as_slice().expect("row-major layout");
        for (j, gj) in g.rows().into_iter().enumerate() {
            let gj = gj.as_slice().expect("row-major layout");
            let mut acc = 0.0;
            for k in 0..ai.len() {
                let diff = ai[k] - gj[k];
                acc += diff * diff;
            }
            out[[i, j]] = acc.sqrt();
        }
    }
    Ok(out)
}

/// Soft distance `H_ij = d_ij/τ + logsumexp_j'(−d_ij'/τ)`, evaluated with the
/// max-shift trick so no exponential is taken at raw scale.
pub fn soft_distance(dists: &Array2<f64>, tau: f64) -> Result<Array2<f64>> {
    if !tau.is_finite() || tau <= 0.0 {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    let mut out = Array2::<f64>::zeros(dists.dim());
    for (i, row) in dists.rows().into_iter().enumerate() {
        // H_j = d_j/τ + logsumexp_j'(−d_j'/τ), rewritten with the row
        // minimum shifted inside: H_j = (d_j − min)/τ + ln Σ exp(−(d_j' − min)/τ).
        // No exponential is ever taken at raw scale, and equal distances
        // give exactly ln(N_g).
        let min_d = row.iter().copied().fold(f64::INFINITY, f64::min);
        let sum: f64 = row.iter().map(|d| (-(d - min_d) / tau).exp()).sum();
        let ln_sum = sum.ln();
        for (j, d) in row.iter().enumerate() {
            out[[i, j]] = (d - min_d) / tau + ln_sum;
        }
    }
    Ok(out)
}

/// Per-row 0/1 mask over the k smallest entries (k clamped to the column
/// count, ties broken toward the smaller gallery index), plus the selected
/// indices in ascending order.
pub fn topk_mask(soft: &Array2<f64>, k: usize) -> (Array2<u8>, Vec<Vec<usize>>) {
    debug_assert!(k >= 1, "top-k selection needs k >= 1");
    let k_eff = k.min(soft.ncols());
    let mut mask = Array2::<u8>::zeros(soft.dim());
    let mut selected = Vec::with_capacity(soft.nrows());
    for (i, row) in soft.rows().into_iter().enumerate() {
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| {
            row[a]
                .partial_cmp(&row[b])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let mut chosen: Vec<usize> = order[..k_eff].to_vec();
        chosen.sort_unstable();
        for &j in &chosen {
            mask[[i, j]] = 1;
        }
        selected.push(chosen);
    }
    (mask, selected)
}

/// The distance-based loss: mean over batch rows of the sum of the k
/// selected soft distances.
pub fn dart3_loss(
    zhat: ArrayView2<f64>,
    g_tilde: ArrayView2<f64>,
    tau: f64,
    k: usize,
) -> Result<LossBreakdown> {
    if g_tilde.nrows() == 0 {
        return Err(Error::Config("gallery must not be empty".into()));
    }
    if zhat.nrows() == 0 {
        return Err(Error::Config("batch must not be empty".into()));
    }
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let distances = euclidean_distances(zhat, g_tilde)?;
    let soft = soft_distance(&distances, tau)?;
    let (mask, row_topk_indices) = topk_mask(&soft, k);

    let mut loss = 0.0;
    for (i, chosen) in row_topk_indices.iter().enumerate() {
        for &j in chosen {
            loss += soft[[i, j]];
        }
    }
    loss /= zhat.nrows() as f64;

    Ok(LossBreakdown {
        loss,
        distances,
        soft,
        mask,
        row_topk_indices,
    })
}

/// Applies the per-camera scale-shift to a raw batch.
pub fn scale_shift_batch(
    batch_raw: ArrayView2<f64>,
    camids: &[u32],
    params: &BTreeMap<u32, CameraMoments>,
) -> Result<Array2<f64>> {
    if batch_raw.nrows() != camids.len() {
        return Err(Error::Shape(format!(
            "batch has {} rows but {} camera ids",
            batch_raw.nrows(),
            camids.len()
        )));
    }
    let mut out = Array2::<f64>::zeros(batch_raw.dim());
    for (i, &cam) in camids.iter().enumerate() {
        let moments = params
            .get(&cam)
            .ok_or_else(|| Error::Config(format!("camera {cam} missing from parameters")))?;
        if moments.mean.len() != batch_raw.ncols() {
            return Err(Error::Shape(format!(
                "camera {cam} parameters have dimension {}, batch has {}",
                moments.mean.len(),
                batch_raw.ncols()
            )));
        }
        let row = batch_raw.row(i);
        crate::camnorm::scale_shift_row(
            row.as_slice().expect("row-major layout"),
            moments,
            out.row_mut(i).into_slice().expect("row-major layout"),
        );
    }
    Ok(out)
}

/// Loss plus exact gradients with respect to the batch parameters.
///
/// The top-k mask is held constant during differentiation. With
/// `u_ij = (ẑ_i − g̃_j)/max(d_ij, floor)` and `p_ij = softmax_j(−d_ij/τ)`:
///
/// ```text
/// ∂L/∂ẑ_i   = (1/(B·τ)) · (Σ_{j∈topk} u_ij − k_eff · Σ_j p_ij·u_ij)
/// ∂L/∂M(c)  = Σ_{i: c_i=c} ∂L/∂ẑ_i ⊙ (−1/Σ(c))
/// ∂L/∂Σ(c)  = Σ_{i: c_i=c} ∂L/∂ẑ_i ⊙ (−(z_i − M(c))/Σ(c)²)
/// ```
pub fn dart3_gradients(
    batch_raw: ArrayView2<f64>,
    camids: &[u32],
    params: &BTreeMap<u32, CameraMoments>,
    g_tilde: ArrayView2<f64>,
    tau: f64,
    k: usize,
) -> Result<(LossBreakdown, Gradients)> {
    let zhat = scale_shift_batch(batch_raw, camids, params)?;
    let breakdown = dart3_loss(zhat.view(), g_tilde, tau, k)?;

    let b = zhat.nrows();
    let d = zhat.ncols();
    let n_g = g_tilde.nrows();
    let k_eff = k.min(n_g) as f64;

    let mut d_zhat = Array2::<f64>::zeros((b, d));
    for i in 0..b {
        // p_ij = exp(−H_ij); rows of exp(−H) sum to one.
        let mut acc = vec![0.0; d];
        for j in 0..n_g {
            let p = (-breakdown.soft[[i, j]]).exp();
            let sel = f64::from(breakdown.mask[[i, j]]);
            let coef = (sel - k_eff * p) / breakdown.distances[[i, j]].max(DIST_FLOOR);
            if coef == 0.0 {
                continue;
            }
            for t in 0..d {
                acc[t] += coef * (zhat[[i, t]] - g_tilde[[j, t]]);
            }
        }
        let scale = 1.0 / (b as f64 * tau);
        for t in 0..d {
            d_zhat[[i, t]] = scale * acc[t];
        }
    }

    let grads = chain_to_params(&d_zhat, batch_raw, camids, params)?;
    for (cam, g) in grads.d_mean.iter().chain(grads.d_scale.iter()) {
        if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient {bad} for camera {cam} parameters"
            )));
        }
    }
    Ok((breakdown, grads))
}

/// Chains a gradient over the scaled-shifted batch back to the per-camera
/// mean and scale parameters.
pub fn chain_to_params(
    d_zhat: &Array2<f64>,
    batch_raw: ArrayView2<f64>,
    camids: &[u32],
    params: &BTreeMap<u32, CameraMoments>,
) -> Result<Gradients> {
    let d = batch_raw.ncols();
    let mut d_mean: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    let mut d_scale: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for (i, &cam) in camids.iter().enumerate() {
        let moments = params
            .get(&cam)
            .ok_or_else(|| Error::Config(format!("camera {cam} missing from parameters")))?;
        let gm = d_mean.entry(cam).or_insert_with(|| vec![0.0; d]);
        let gs = d_scale.entry(cam).or_insert_with(|| vec![0.0; d]);
        for t in 0..d {
            let s = moments.scale[t];
            let g = d_zhat[[i, t]];
            gm[t] += g * (-1.0 / s);
            gs[t] += g * (-(batch_raw[[i, t]] - moments.mean[t]) / (s * s));
        }
    }
    Ok(Gradients {
        d_zhat: d_zhat.clone(),
        d_mean,
        d_scale,
    })
}

/// Cosine-similarity entropy baseline.
///
/// Per row: take the k largest cosine similarities to the gallery, softmax
/// them, and return the mean Shannon entropy (to be minimized) along with
/// its analytic gradient with respect to the batch. The top-k selection is
/// held constant during differentiation.
pub fn temp_objective(
    zhat: ArrayView2<f64>,
    g_tilde: ArrayView2<f64>,
    k: usize,
) -> Result<(f64, Array2<f64>)> {
    if g_tilde.nrows() == 0 {
        return Err(Error::Config("gallery must not be empty".into()));
    }
    if zhat.nrows() == 0 {
        return Err(Error::Config("batch must not be empty".into()));
    }
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if zhat.ncols() != g_tilde.ncols() {
        return Err(Error::Shape(format!(
            "dimension mismatch: {} vs {}",
            zhat.ncols(),
            g_tilde.ncols()
        )));
    }

    let b = zhat.nrows();
    let d = zhat.ncols();
    let n_g = g_tilde.nrows();
    let k_eff = k.min(n_g);

    let g_norms: Vec<f64> = g_tilde
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR))
        .collect();

    let mut total_entropy = 0.0;
    let mut d_zhat = Array2::<f64>::zeros((b, d));
    for i in 0..b {
        let zi = zhat.row(i);
        let z_norm = zi.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);

        let mut sims = vec![0.0; n_g];
        for j in 0..n_g {
            let dot: f64 = (0..d).map(|t| zi[t] * g_tilde[[j, t]]).sum();
            sims[j] = dot / (z_norm * g_norms[j]);
        }

        // k largest similarities, ties toward the smaller gallery index.
        let mut order: Vec<usize> = (0..n_g).collect();
        order.sort_by(|&a, &b| {
            sims[b]
                .partial_cmp(&sims[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let chosen = &order[..k_eff];

        let max_s = chosen.iter().map(|&j| sims[j]).fold(f64::NEG_INFINITY, f64::max);
        let exp_sum: f64 = chosen.iter().map(|&j| (sims[j] - max_s).exp()).sum();
        let probs: Vec<f64> = chosen
            .iter()
            .map(|&j| (sims[j] - max_s).exp() / exp_sum)
            .collect();
        let entropy: f64 = probs
            .iter()
            .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
            .sum();
        total_entropy += entropy;

        // dE/ds_l = −p_l (ln p_l + E); chain through the cosine similarity.
        for (slot, &j) in chosen.iter().enumerate() {
            let p = probs[slot];
            if p <= 0.0 {
                continue;
            }
            let de_ds = -p * (p.ln() + entropy);
            let coef = de_ds / (b as f64);
            for t in 0..d {
                let ds_dz = g_tilde[[j, t]] / (z_norm * g_norms[j])
                    - sims[j] * zi[t] / (z_norm * z_norm);
                d_zhat[[i, t]] += coef * ds_dz;
            }
        }
    }

    Ok((total_entropy / b as f64, d_zhat))
}
