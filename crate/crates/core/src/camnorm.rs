//! Per-camera feature statistics and normalization.
//!
//! For every camera this module computes a per-dimension mean and population
//! standard deviation, either pooled over query+gallery rows (the default)
//! or per role. Normalizing a feature by its camera's statistics cancels any
//! constant per-camera affine bias exactly, and the same statistics double
//! as the initial values of the learnable scale-shift parameters consumed by
//! the adapter: the query-side pair is learnable, the gallery-side pair is
//! frozen.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::embedding_store::EmbeddingSet;
use crate::error::{Error, Result};

/// Standard deviations below this are clamped so normalization stays finite.
pub const DEFAULT_SCALE_FLOOR: f64 = 1e-6;

/// Mean/scale vectors for one camera, plus the sample count that produced
/// them (0 marks a global-statistics fallback entry).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraMoments {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub count: usize,
}

impl CameraMoments {
    /// The identity transform: zero mean, unit scale.
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
            count: 0,
        }
    }
}

/// Per-camera moments for one role (query or gallery).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RolePartition {
    pub cameras: BTreeMap<u32, CameraMoments>,
}

impl RolePartition {
    pub fn get(&self, camid: u32) -> Option<&CameraMoments> {
        self.cameras.get(&camid)
    }

    pub fn dim(&self) -> Option<usize> {
        self.cameras.values().next().map(|m| m.mean.len())
    }

    /// Combines the per-camera moments (weighted by sample count) into one
    /// global mean/scale pair. Fallback entries with count 0 are skipped.
    pub fn global_moments(&self, scale_floor: f64) -> Option<CameraMoments> {
        let d = self.dim()?;
        let total: usize = self.cameras.values().map(|m| m.count).sum();
        if total == 0 {
            return None;
        }
        let mut mean = vec![0.0; d];
        let mut second = vec![0.0; d];
        for m in self.cameras.values().filter(|m| m.count > 0) {
            let w = m.count as f64;
            for k in 0..d {
                mean[k] += w * m.mean[k];
                // E[x²] per camera is σ² + μ² (population statistics).
                second[k] += w * (m.scale[k] * m.scale[k] + m.mean[k] * m.mean[k]);
            }
        }
        let n = total as f64;
        let mut scale = vec![0.0; d];
        for k in 0..d {
            mean[k] /= n;
            let var = (second[k] / n - mean[k] * mean[k]).max(0.0);
            scale[k] = var.sqrt().max(scale_floor);
        }
        Some(CameraMoments {
            mean,
            scale,
            count: total,
        })
    }
}

/// Query and gallery statistic partitions plus the scale floor in force.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraStats {
    pub scale_floor: f64,
    pub query: RolePartition,
    pub gallery: RolePartition,
    #[serde(skip)]
    pub warnings: Vec<String>,
}

impl CameraStats {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// How per-camera statistics are accumulated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    /// Pool query and gallery rows of a camera into one sample set and
    /// assign the resulting moments to both partitions.
    Pooled,
    /// Compute query statistics from query rows only and gallery statistics
    /// from gallery rows only; cameras missing from a role fall back to that
    /// role's global moments.
    Separate,
}

impl std::fmt::Display for PoolMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PoolMode::Pooled => write!(f, "pooled"),
            PoolMode::Separate => write!(f, "separate"),
        }
    }
}

/// Computes per-camera population statistics with the default scale floor.
pub fn compute_camera_stats(
    query: &EmbeddingSet,
    gallery: &EmbeddingSet,
    mode: PoolMode,
) -> Result<CameraStats> {
    compute_camera_stats_with_floor(query, gallery, mode, DEFAULT_SCALE_FLOOR)
}

pub fn compute_camera_stats_with_floor(
    query: &EmbeddingSet,
    gallery: &EmbeddingSet,
    mode: PoolMode,
    scale_floor: f64,
) -> Result<CameraStats> {
    if !scale_floor.is_finite() || scale_floor <= 0.0 {
        return Err(Error::Config("scale_floor must be positive".into()));
    }
    if !query.is_empty() && !gallery.is_empty() && query.dim() != gallery.dim() {
        return Err(Error::Shape(format!(
            "query dimension {} does not match gallery dimension {}",
            query.dim(),
            gallery.dim()
        )));
    }

    let mut cameras: Vec<u32> = query
        .camera_ids()
        .into_iter()
        .chain(gallery.camera_ids())
        .collect();
    cameras.sort_unstable();
    cameras.dedup();

    let q_rows = crate::embedding_store::camera_partition(query);
    let g_rows = crate::embedding_store::camera_partition(gallery);

    let mut stats = CameraStats {
        scale_floor,
        query: RolePartition::default(),
        gallery: RolePartition::default(),
        warnings: Vec::new(),
    };

    match mode {
        PoolMode::Pooled => {
            for &cam in &cameras {
                let empty = Vec::new();
                let qi = q_rows.get(&cam).unwrap_or(&empty);
                let gi = g_rows.get(&cam).unwrap_or(&empty);
                let moments = pooled_moments(
                    &[(query.data(), qi.as_slice()), (gallery.data(), gi.as_slice())],
                    scale_floor,
                );
                match moments {
                    Some(m) => {
                        stats.query.cameras.insert(cam, m.clone());
                        stats.gallery.cameras.insert(cam, m);
                    }
                    None => stats
                        .warnings
                        .push(format!("camera {cam}: no samples in either role, omitted")),
                }
            }
        }
        PoolMode::Separate => {
            for &cam in &cameras {
                let q = q_rows
                    .get(&cam)
                    .and_then(|rows| pooled_moments(&[(query.data(), rows)], scale_floor));
                let g = g_rows
                    .get(&cam)
                    .and_then(|rows| pooled_moments(&[(gallery.data(), rows)], scale_floor));
                if q.is_none() && g.is_none() {
                    stats
                        .warnings
                        .push(format!("camera {cam}: no samples in either role, omitted"));
                    continue;
                }
                if let Some(m) = q {
                    stats.query.cameras.insert(cam, m);
                }
                if let Some(m) = g {
                    stats.gallery.cameras.insert(cam, m);
                }
            }
            // Cameras seen in only one role inherit the other role's global
            // statistics as a count-0 fallback entry.
            fill_role_gaps(&mut stats.query, &cameras, scale_floor, &mut stats.warnings, "query");
            fill_role_gaps(
                &mut stats.gallery,
                &cameras,
                scale_floor,
                &mut stats.warnings,
                "gallery",
            );
        }
    }

    Ok(stats)
}

fn fill_role_gaps(
    partition: &mut RolePartition,
    cameras: &[u32],
    scale_floor: f64,
    warnings: &mut Vec<String>,
    role_name: &str,
) {
    let global = partition.global_moments(scale_floor);
    for &cam in cameras {
        if partition.cameras.contains_key(&cam) {
            continue;
        }
        match &global {
            Some(g) => {
                let mut fallback = g.clone();
                fallback.count = 0;
                partition.cameras.insert(cam, fallback);
                warnings.push(format!(
                    "camera {cam}: no {role_name} samples, using global {role_name} statistics"
                ));
            }
            None => warnings.push(format!(
                "camera {cam}: no {role_name} samples and no global fallback available"
            )),
        }
    }
}

/// Two-pass population mean/std over the listed rows of one or more sources.
fn pooled_moments(
    sources: &[(&Array2<f64>, &[usize])],
    scale_floor: f64,
) -> Option<CameraMoments> {
    let n: usize = sources.iter().map(|(_, rows)| rows.len()).sum();
    if n == 0 {
        return None;
    }
    let d = sources
        .iter()
        .find(|(_, rows)| !rows.is_empty())
        .map(|(data, _)| data.ncols())?;

    let mut mean = vec![0.0; d];
    for (data, rows) in sources {
        for &r in *rows {
            for k in 0..d {
                mean[k] += data[[r, k]];
            }
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }

    let mut var = vec![0.0; d];
    for (data, rows) in sources {
        for &r in *rows {
            for k in 0..d {
                let diff = data[[r, k]] - mean[k];
                var[k] += diff * diff;
            }
        }
    }
    let scale: Vec<f64> = var
        .iter()
        .map(|v| (v / n as f64).sqrt().max(scale_floor))
        .collect();

    Some(CameraMoments {
        mean,
        scale,
        count: n,
    })
}

/// Row-wise scale-shift kernel: `out = (row − mean) / scale`.
///
/// Shared by [`normalize`] and the adapter so that the zero-learning-rate
/// adaptation path is byte-identical to plain normalization.
pub(crate) fn scale_shift_row(row: &[f64], moments: &CameraMoments, out: &mut [f64]) {
    for k in 0..row.len() {
        out[k] = (row[k] - moments.mean[k]) / moments.scale[k];
    }
}

/// Normalizes every row by its camera's moments; metadata is unchanged.
pub fn normalize(set: &EmbeddingSet, params: &RolePartition) -> Result<EmbeddingSet> {
    if let Some(d) = params.dim() {
        if !set.is_empty() && d != set.dim() {
            return Err(Error::Shape(format!(
                "statistics dimension {} does not match embedding dimension {}",
                d,
                set.dim()
            )));
        }
    }
    let mut data = set.data().clone();
    for (i, &cam) in set.camids().iter().enumerate() {
        let moments = params.get(cam).ok_or_else(|| {
            Error::Config(format!("camera {cam} missing from normalization statistics"))
        })?;
        let row = set.data().row(i);
        scale_shift_row(
            row.as_slice().expect("row-major layout"),
            moments,
            data.row_mut(i).into_slice().expect("row-major layout"),
        );
    }
    set.with_data(data)
}

/// The adapter's parameter split: query-side moments are learnable, the
/// gallery side stays frozen after initialization.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalParams {
    pub learnable: BTreeMap<u32, CameraMoments>,
    pub frozen: BTreeMap<u32, CameraMoments>,
    pub scale_floor: f64,
}

/// Deep-copies the statistics into an independently mutable parameter set.
pub fn init_external_params(stats: &CameraStats) -> ExternalParams {
    ExternalParams {
        learnable: stats.query.cameras.clone(),
        frozen: stats.gallery.cameras.clone(),
        scale_floor: stats.scale_floor,
    }
}
