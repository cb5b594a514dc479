//! Streaming adaptation of per-camera scale-shift parameters.
//!
//! [`init_adapter`] freezes the gallery side: the normalized gallery and its
//! statistics never change afterwards. [`adapt_batch`] then processes query
//! batches: scale-shift with the current learnable parameters, evaluate the
//! objective, update the query-side mean/scale vectors (Adam by default),
//! and return the batch transformed with the post-update parameters. In
//! non-episodic mode (the default) parameters persist across batches; in
//! episodic mode they reset to the initialization snapshot (optimizer
//! moments included) before every batch.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camnorm::{init_external_params, normalize, CameraMoments, CameraStats, RolePartition};
use crate::embedding_store::EmbeddingSet;
use crate::error::{Error, Result};
use crate::objective;
use crate::rng;

const STREAM_GROUNDING: u64 = 0x20;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Whether parameters persist across batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptMode {
    NonEpisodic,
    Episodic,
}

/// Which adaptation objective drives the updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveKind {
    /// Top-k masked softmax of Euclidean distances.
    Dart3,
    /// Cosine top-k softmax entropy.
    Temp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Transform applied to rows from cameras unseen at initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FallbackKind {
    /// Seed the camera from the global statistics of the initialization set.
    GlobalStats,
    /// Seed the camera with zero mean and unit scale.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub tau: f64,
    pub k: usize,
    pub lr: f64,
    pub steps_per_batch: usize,
    pub batch_size: usize,
    pub mode: AdaptMode,
    pub objective: ObjectiveKind,
    pub grounding_per_batch: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub unseen_camera_fallback: FallbackKind,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            tau: 100.0,
            k: 3,
            lr: 1e-4,
            steps_per_batch: 1,
            batch_size: 32,
            mode: AdaptMode::NonEpisodic,
            objective: ObjectiveKind::Dart3,
            grounding_per_batch: 0,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            unseen_camera_fallback: FallbackKind::GlobalStats,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.tau.is_finite() || self.tau <= 0.0 {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        // lr = 0 is the documented no-update degenerate case.
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config(format!(
                "lr must be non-negative, got {}",
                self.lr
            )));
        }
        if self.steps_per_batch == 0 {
            return Err(Error::Config("steps_per_batch must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// First/second Adam moment vectors for one camera's mean and scale.
#[derive(Debug, Clone, PartialEq)]
struct OptMoments {
    m_mean: Vec<f64>,
    v_mean: Vec<f64>,
    m_scale: Vec<f64>,
    v_scale: Vec<f64>,
    steps: u64,
}

impl OptMoments {
    fn zeros(dim: usize) -> Self {
        Self {
            m_mean: vec![0.0; dim],
            v_mean: vec![0.0; dim],
            m_scale: vec![0.0; dim],
            v_scale: vec![0.0; dim],
            steps: 0,
        }
    }
}

#[derive(Debug, Clone)]
struct Snapshot {
    learnable: BTreeMap<u32, CameraMoments>,
    moments: BTreeMap<u32, OptMoments>,
}

/// Rows available for grounding-sample mixing.
#[derive(Debug, Clone)]
pub struct GroundingPool {
    pub features: Array2<f64>,
    pub camids: Vec<u32>,
}

/// Mutable adapter state. Single-writer: batches must be processed serially.
#[derive(Debug, Clone)]
pub struct AdapterState {
    learnable: BTreeMap<u32, CameraMoments>,
    frozen: BTreeMap<u32, CameraMoments>,
    gallery_norm: Array2<f64>,
    scale_floor: f64,
    dim: usize,
    fallback_moments: CameraMoments,
    moments: BTreeMap<u32, OptMoments>,
    batches_seen: u64,
    snapshot: Snapshot,
    grounding_pool: Option<GroundingPool>,
}

impl AdapterState {
    /// The learnable query-side parameters.
    pub fn learnable(&self) -> &BTreeMap<u32, CameraMoments> {
        &self.learnable
    }

    /// The frozen gallery-side parameters.
    pub fn frozen(&self) -> &BTreeMap<u32, CameraMoments> {
        &self.frozen
    }

    /// The gallery features normalized once at initialization.
    pub fn gallery_norm(&self) -> &Array2<f64> {
        &self.gallery_norm
    }

    pub fn batches_seen(&self) -> u64 {
        self.batches_seen
    }

    /// Number of learnable scalars: two d-vectors per camera.
    pub fn learnable_scalar_count(&self) -> usize {
        2 * self.dim * self.learnable.len()
    }

    /// L2 norm over all learnable parameter entries.
    pub fn params_norm(&self) -> f64 {
        self.learnable
            .values()
            .flat_map(|m| m.mean.iter().chain(m.scale.iter()))
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Replaces the pool that grounding samples are drawn from.
    pub fn set_grounding_pool(&mut self, pool: GroundingPool) {
        self.grounding_pool = Some(pool);
    }

    fn restore(&mut self, learnable: BTreeMap<u32, CameraMoments>, moments: BTreeMap<u32, OptMoments>) {
        self.learnable = learnable;
        self.moments = moments;
    }
}

/// Per-batch adaptation record. `losses` holds one entry per optimization
/// step (evaluated before the update) plus a final post-update evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchDiagnostics {
    pub batch_index: usize,
    pub losses: Vec<f64>,
    pub params_norm: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunDiagnostics {
    pub batches: Vec<BatchDiagnostics>,
    pub learnable_scalars: usize,
    pub n_cameras: usize,
    pub dim: usize,
    pub wall_ms_total: f64,
}

/// Builds the adapter state: normalizes the gallery once with the frozen
/// parameters, snapshots the learnable side, and zeroes optimizer moments.
pub fn init_adapter(
    stats: &CameraStats,
    gallery: &EmbeddingSet,
    config: &AdapterConfig,
) -> Result<AdapterState> {
    config.validate()?;
    if gallery.is_empty() {
        return Err(Error::Config("gallery must not be empty".into()));
    }

    let params = init_external_params(stats);
    let frozen_partition = RolePartition {
        cameras: params.frozen.clone(),
    };
    let gallery_norm = normalize(gallery, &frozen_partition)?.data().clone();

    let fallback_moments = stats
        .query
        .global_moments(stats.scale_floor)
        .or_else(|| stats.gallery.global_moments(stats.scale_floor))
        .map(|mut m| {
            m.count = 0;
            m
        })
        .unwrap_or_else(|| CameraMoments::identity(gallery.dim()));

    let grounding_pool = if config.grounding_per_batch > 0 {
        Some(GroundingPool {
            features: gallery.data().clone(),
            camids: gallery.camids().to_vec(),
        })
    } else {
        None
    };

    let snapshot = Snapshot {
        learnable: params.learnable.clone(),
        moments: BTreeMap::new(),
    };

    Ok(AdapterState {
        learnable: params.learnable,
        frozen: params.frozen,
        gallery_norm,
        scale_floor: params.scale_floor,
        dim: gallery.dim(),
        fallback_moments,
        moments: BTreeMap::new(),
        batches_seen: 0,
        snapshot,
        grounding_pool,
    })
}

/// Scale-shifts a raw batch with the current learnable parameters.
///
/// Rows from cameras without parameters are transformed with the configured
/// fallback, and the camera is registered as learnable from then on.
pub fn apply_params(
    batch: ArrayView2<f64>,
    camids: &[u32],
    state: &mut AdapterState,
    fallback: FallbackKind,
) -> Result<Array2<f64>> {
    if batch.nrows() != camids.len() {
        return Err(Error::Shape(format!(
            "batch has {} rows but {} camera ids",
            batch.nrows(),
            camids.len()
        )));
    }
    if batch.nrows() > 0 && batch.ncols() != state.dim {
        return Err(Error::Shape(format!(
            "batch dimension {} does not match adapter dimension {}",
            batch.ncols(),
            state.dim
        )));
    }
    for &cam in camids {
        if !state.learnable.contains_key(&cam) {
            let mut seeded = match fallback {
                FallbackKind::Identity => CameraMoments::identity(state.dim),
                FallbackKind::GlobalStats => state.fallback_moments.clone(),
            };
            seeded.count = 0;
            state.learnable.insert(cam, seeded);
        }
    }
    objective::scale_shift_batch(batch, camids, &state.learnable)
}

fn optimizer_update(
    state: &mut AdapterState,
    grads: &objective::Gradients,
    config: &AdapterConfig,
) {
    let dim = state.dim;
    for (&cam, g_mean) in &grads.d_mean {
        let g_scale = &grads.d_scale[&cam];
        let params = state
            .learnable
            .get_mut(&cam)
            .expect("gradient for unregistered camera");
        match config.optimizer {
            OptimizerKind::Sgd => {
                for t in 0..dim {
                    params.mean[t] -= config.lr * g_mean[t];
                    params.scale[t] -= config.lr * g_scale[t];
                }
            }
            OptimizerKind::Adam => {
                let moments = state
                    .moments
                    .entry(cam)
                    .or_insert_with(|| OptMoments::zeros(dim));
                moments.steps += 1;
                let step = moments.steps as i32;
                let bc1 = 1.0 - ADAM_BETA1.powi(step);
                let bc2 = 1.0 - ADAM_BETA2.powi(step);
                for t in 0..dim {
                    for (grad, m, v, param) in [
                        (
                            g_mean[t],
                            &mut moments.m_mean[t],
                            &mut moments.v_mean[t],
                            &mut params.mean[t],
                        ),
                        (
                            g_scale[t],
                            &mut moments.m_scale[t],
                            &mut moments.v_scale[t],
                            &mut params.scale[t],
                        ),
                    ] {
                        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * grad;
                        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * grad * grad;
                        let m_hat = *m / bc1;
                        let v_hat = *v / bc2;
                        *param -= config.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        // Keep scales positive: the transform divides by them.
        let params = state.learnable.get_mut(&cam).unwrap();
        for t in 0..dim {
            if params.scale[t] < state.scale_floor {
                params.scale[t] = state.scale_floor;
            }
        }
    }
}

fn evaluate_objective(
    loss_rows: ArrayView2<f64>,
    loss_camids: &[u32],
    state: &AdapterState,
    config: &AdapterConfig,
) -> Result<(f64, objective::Gradients)> {
    match config.objective {
        ObjectiveKind::Dart3 => {
            let (breakdown, grads) = objective::dart3_gradients(
                loss_rows,
                loss_camids,
                &state.learnable,
                state.gallery_norm.view(),
                config.tau,
                config.k,
            )?;
            Ok((breakdown.loss, grads))
        }
        ObjectiveKind::Temp => {
            let zhat = objective::scale_shift_batch(loss_rows, loss_camids, &state.learnable)?;
            let (loss, d_zhat) =
                objective::temp_objective(zhat.view(), state.gallery_norm.view(), config.k)?;
            let grads =
                objective::chain_to_params(&d_zhat, loss_rows, loss_camids, &state.learnable)?;
            Ok((loss, grads))
        }
    }
}

fn loss_only(
    loss_rows: ArrayView2<f64>,
    loss_camids: &[u32],
    state: &AdapterState,
    config: &AdapterConfig,
) -> Result<f64> {
    let zhat = objective::scale_shift_batch(loss_rows, loss_camids, &state.learnable)?;
    match config.objective {
        ObjectiveKind::Dart3 => Ok(objective::dart3_loss(
            zhat.view(),
            state.gallery_norm.view(),
            config.tau,
            config.k,
        )?
        .loss),
        ObjectiveKind::Temp => {
            Ok(objective::temp_objective(zhat.view(), state.gallery_norm.view(), config.k)?.0)
        }
    }
}

/// Adapts on one batch and returns the batch transformed with the
/// post-update parameters, plus the loss trajectory (one entry per step,
/// then a final post-update evaluation).
///
/// Grounding rows join the loss computation but never the returned features.
/// A non-finite loss aborts the batch and rolls parameters and optimizer
/// moments back to their pre-batch values.
pub fn adapt_batch(
    batch: ArrayView2<f64>,
    camids: &[u32],
    state: &mut AdapterState,
    config: &AdapterConfig,
) -> Result<(Array2<f64>, Vec<f64>)> {
    config.validate()?;
    if batch.nrows() == 0 {
        return Err(Error::Config("batch must not be empty".into()));
    }

    if config.mode == AdaptMode::Episodic {
        state.learnable = state.snapshot.learnable.clone();
        state.moments = state.snapshot.moments.clone();
    }
    let backup_learnable = state.learnable.clone();
    let backup_moments = state.moments.clone();

    let result = adapt_batch_inner(batch, camids, state, config);
    match result {
        Ok(out) => {
            state.batches_seen += 1;
            Ok(out)
        }
        Err(e) => {
            state.restore(backup_learnable, backup_moments);
            Err(e)
        }
    }
}

fn adapt_batch_inner(
    batch: ArrayView2<f64>,
    camids: &[u32],
    state: &mut AdapterState,
    config: &AdapterConfig,
) -> Result<(Array2<f64>, Vec<f64>)> {
    let d = batch.ncols();

    // Grounding rows are drawn once per batch and reused across steps.
    let (loss_rows, loss_camids) = if config.grounding_per_batch > 0 {
        let pool = state.grounding_pool.as_ref().ok_or_else(|| {
            Error::Config("grounding requested but no grounding pool is set".into())
        })?;
        if pool.features.nrows() == 0 {
            return Err(Error::Config("grounding pool is empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(rng::derive2(
            config.seed,
            STREAM_GROUNDING,
            state.batches_seen,
        ));
        let mut rows = Array2::<f64>::zeros((batch.nrows() + config.grounding_per_batch, d));
        let mut cams = Vec::with_capacity(batch.nrows() + config.grounding_per_batch);
        for (i, row) in batch.rows().into_iter().enumerate() {
            rows.row_mut(i).assign(&row);
            cams.push(camids[i]);
        }
        for g in 0..config.grounding_per_batch {
            let pick = rng.random_range(0..pool.features.nrows());
            rows.row_mut(batch.nrows() + g).assign(&pool.features.row(pick));
            cams.push(pool.camids[pick]);
        }
        (rows, cams)
    } else {
        (batch.to_owned(), camids.to_vec())
    };

    let mut losses = Vec::with_capacity(config.steps_per_batch + 1);
    for _ in 0..config.steps_per_batch {
        // Registers unseen cameras before gradients are taken.
        apply_params(loss_rows.view(), &loss_camids, state, config.unseen_camera_fallback)?;
        let (loss, grads) = evaluate_objective(loss_rows.view(), &loss_camids, state, config)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {loss}")));
        }
        losses.push(loss);
        optimizer_update(state, &grads, config);
    }
    let final_loss = loss_only(loss_rows.view(), &loss_camids, state, config)?;
    if !final_loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {final_loss}")));
    }
    losses.push(final_loss);

    let adapted = apply_params(batch, camids, state, config.unseen_camera_fallback)?;
    Ok((adapted, losses))
}

/// Runs the adapter over a query set in consecutive batches and returns the
/// adapted features (aligned with the input row order) plus diagnostics.
pub fn run_stream(
    query: &EmbeddingSet,
    state: &mut AdapterState,
    config: &AdapterConfig,
) -> Result<(EmbeddingSet, RunDiagnostics)> {
    config.validate()?;
    let start = Instant::now();
    let n = query.len();
    let mut adapted = Array2::<f64>::zeros((n, query.dim()));
    let mut batches = Vec::new();

    for (batch_index, chunk_start) in (0..n).step_by(config.batch_size).enumerate() {
        let end = (chunk_start + config.batch_size).min(n);
        let batch_start_time = Instant::now();
        let batch = query.data().slice(ndarray::s![chunk_start..end, ..]);
        let camids = &query.camids()[chunk_start..end];
        let (out, losses) = adapt_batch(batch, camids, state, config)?;
        adapted
            .slice_mut(ndarray::s![chunk_start..end, ..])
            .assign(&out);
        batches.push(BatchDiagnostics {
            batch_index,
            losses,
            params_norm: state.params_norm(),
            wall_ms: batch_start_time.elapsed().as_secs_f64() * 1e3,
        });
    }

    let diagnostics = RunDiagnostics {
        batches,
        learnable_scalars: state.learnable_scalar_count(),
        n_cameras: state.learnable.len(),
        dim: state.dim,
        wall_ms_total: start.elapsed().as_secs_f64() * 1e3,
    };
    Ok((query.with_data(adapted)?, diagnostics))
}
