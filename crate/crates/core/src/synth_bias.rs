//! Synthetic identity clusters with a planted per-camera affine bias.
//!
//! The generator draws Gaussian identity clusters (the unbiased features),
//! then [`apply_bias`] distorts each row with its camera's scale/shift pair,
//! optionally perturbed by per-sample Gaussian noise. Because the bias is
//! known exactly, every downstream claim (normalization cancels constant
//! bias, statistics recover the bias parameters, bias hurts retrieval) can
//! be tested against ground truth.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embedding_store::{EmbeddingSet, Role};
use crate::error::{Error, Result};
use crate::rng;

/// Scale entries are clamped here after noise so the bias stays invertible.
pub const ALPHA_FLOOR: f64 = 1e-3;

const STREAM_CLEAN: u64 = 0x10;
const STREAM_BIAS: u64 = 0x11;
const STREAM_SPEC: u64 = 0x12;

/// Ground-truth per-camera bias: `biased = alpha ⊙ clean + beta`, with
/// optional per-sample Gaussian noise of magnitude `noise_sigma` added to
/// both parameters independently per row and dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasSpec {
    pub alphas: BTreeMap<u32, Vec<f64>>,
    pub betas: BTreeMap<u32, Vec<f64>>,
    pub noise_sigma: f64,
}

impl BiasSpec {
    pub fn validate(&self) -> Result<()> {
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be non-negative".into()));
        }
        if self.alphas.len() != self.betas.len()
            || self.alphas.keys().ne(self.betas.keys())
        {
            return Err(Error::Config(
                "alpha and beta camera key sets differ".into(),
            ));
        }
        let mut dim = None;
        for (cam, alpha) in &self.alphas {
            let beta = &self.betas[cam];
            if alpha.len() != beta.len() {
                return Err(Error::Config(format!(
                    "camera {cam}: alpha has {} entries, beta has {}",
                    alpha.len(),
                    beta.len()
                )));
            }
            match dim {
                None => dim = Some(alpha.len()),
                Some(d) if d != alpha.len() => {
                    return Err(Error::Config(format!(
                        "camera {cam}: dimension {} differs from {}",
                        alpha.len(),
                        d
                    )))
                }
                _ => {}
            }
            if let Some(bad) = alpha.iter().find(|a| **a <= 0.0) {
                return Err(Error::Config(format!(
                    "camera {cam}: non-positive alpha entry {bad}"
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> Option<usize> {
        self.alphas.values().next().map(Vec::len)
    }

    /// Random spec: `alpha = exp(alpha_log_sigma · n)`, `beta = beta_sigma · n`.
    pub fn random(
        cameras: &[u32],
        dim: usize,
        alpha_log_sigma: f64,
        beta_sigma: f64,
        noise_sigma: f64,
        seed: u64,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("bias dimension must be at least 1".into()));
        }
        let mut rng = rng::stream_rng(seed, STREAM_SPEC);
        let mut alphas = BTreeMap::new();
        let mut betas = BTreeMap::new();
        for &cam in cameras {
            let alpha: Vec<f64> = (0..dim)
                .map(|_| (alpha_log_sigma * rng.sample::<f64, _>(StandardNormal)).exp())
                .collect();
            let beta: Vec<f64> = (0..dim)
                .map(|_| beta_sigma * rng.sample::<f64, _>(StandardNormal))
                .collect();
            alphas.insert(cam, alpha);
            betas.insert(cam, beta);
        }
        let spec = Self {
            alphas,
            betas,
            noise_sigma,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let spec: Self = serde_json::from_str(&text)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Shape of the synthetic dataset: Gaussian identity centers with Gaussian
/// within-identity spread, camera IDs assigned round-robin per identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_ids: usize,
    pub samples_per_id_query: usize,
    pub samples_per_id_gallery: usize,
    pub dim: usize,
    pub n_cameras: usize,
    pub id_center_sigma: f64,
    pub within_id_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_ids: 50,
            samples_per_id_query: 2,
            samples_per_id_gallery: 4,
            dim: 64,
            n_cameras: 6,
            id_center_sigma: 1.0,
            within_id_sigma: 0.3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_ids", self.n_ids),
            ("samples_per_id_query", self.samples_per_id_query),
            ("samples_per_id_gallery", self.samples_per_id_gallery),
            ("dim", self.dim),
            ("n_cameras", self.n_cameras),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !self.id_center_sigma.is_finite() || self.id_center_sigma <= 0.0 {
            return Err(Error::Config("id_center_sigma must be positive".into()));
        }
        if !self.within_id_sigma.is_finite() || self.within_id_sigma <= 0.0 {
            return Err(Error::Config("within_id_sigma must be positive".into()));
        }
        if self.within_id_sigma >= self.id_center_sigma {
            return Err(Error::Config(
                "within_id_sigma must be smaller than id_center_sigma".into(),
            ));
        }
        Ok(())
    }
}

/// Generates clean (unbiased) query and gallery sets.
///
/// Identity centers are i.i.d. `N(0, id_center_sigma²·I)`; each sample is its
/// center plus `N(0, within_id_sigma²·I)`. Camera IDs rotate per identity,
/// with the gallery continuing the query rotation, so every identity appears
/// under at least two cameras whenever `n_cameras ≥ 2`. Values are quantized
/// to the f32 grid so the outputs survive storage round-trips bit-exactly.
pub fn generate_clean(config: &SynthConfig) -> Result<(EmbeddingSet, EmbeddingSet)> {
    config.validate()?;
    let mut rng = rng::stream_rng(config.seed, STREAM_CLEAN);
    let d = config.dim;

    let centers: Vec<Vec<f64>> = (0..config.n_ids)
        .map(|_| {
            (0..d)
                .map(|_| config.id_center_sigma * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();

    let mut build = |samples_per_id: usize, camid_offset: usize, role: Role| -> Result<EmbeddingSet> {
        let n = config.n_ids * samples_per_id;
        let mut data = Array2::<f64>::zeros((n, d));
        let mut pids = Vec::with_capacity(n);
        let mut camids = Vec::with_capacity(n);
        let mut row = 0usize;
        for (id, center) in centers.iter().enumerate() {
            for s in 0..samples_per_id {
                for (k, c) in center.iter().enumerate() {
                    let v = c + config.within_id_sigma * rng.sample::<f64, _>(StandardNormal);
                    data[[row, k]] = f64::from(v as f32);
                }
                pids.push(id as i64);
                camids.push(((id + camid_offset + s) % config.n_cameras) as u32);
                row += 1;
            }
        }
        EmbeddingSet::new(data, pids, camids, role)
    };

    let query = build(config.samples_per_id_query, 0, Role::Query)?;
    let gallery = build(
        config.samples_per_id_gallery,
        config.samples_per_id_query,
        Role::Gallery,
    )?;
    Ok((query, gallery))
}

/// Applies the per-camera bias: row i becomes `(α+ε_α) ⊙ z_i + (β+ε_β)`.
///
/// Noise is drawn fresh per row and dimension when `noise_sigma > 0` and is
/// identically zero otherwise (the output is then independent of `seed`).
/// Noised scales are clamped at [`ALPHA_FLOOR`] to keep the model invertible.
pub fn apply_bias(clean: &EmbeddingSet, spec: &BiasSpec, seed: u64) -> Result<EmbeddingSet> {
    spec.validate()?;
    check_coverage(clean, spec)?;

    let d = clean.dim();
    let mut rng = rng::stream_rng(seed, STREAM_BIAS);
    let mut data = clean.data().clone();
    for (row, &cam) in clean.camids().iter().enumerate() {
        let alpha = &spec.alphas[&cam];
        let beta = &spec.betas[&cam];
        if spec.noise_sigma > 0.0 {
            let eps_alpha: Vec<f64> = (0..d)
                .map(|_| spec.noise_sigma * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let eps_beta: Vec<f64> = (0..d)
                .map(|_| spec.noise_sigma * rng.sample::<f64, _>(StandardNormal))
                .collect();
            for k in 0..d {
                let a = (alpha[k] + eps_alpha[k]).max(ALPHA_FLOOR);
                data[[row, k]] = a * data[[row, k]] + beta[k] + eps_beta[k];
            }
        } else {
            for k in 0..d {
                data[[row, k]] = alpha[k] * data[[row, k]] + beta[k];
            }
        }
    }
    clean.with_data(data)
}

/// Inverts a noise-free bias: row i becomes `(z_i − β) / α`.
///
/// Exact inverse of [`apply_bias`] when the spec's `noise_sigma` is zero.
pub fn recover_unbiased(biased: &EmbeddingSet, spec: &BiasSpec) -> Result<EmbeddingSet> {
    spec.validate()?;
    check_coverage(biased, spec)?;
    for (cam, alpha) in &spec.alphas {
        if let Some(bad) = alpha.iter().find(|a| **a < ALPHA_FLOOR) {
            return Err(Error::Numeric(format!(
                "camera {cam}: alpha entry {bad} below floor {ALPHA_FLOOR}"
            )));
        }
    }

    let d = biased.dim();
    let mut data = biased.data().clone();
    for (row, &cam) in biased.camids().iter().enumerate() {
        let alpha = &spec.alphas[&cam];
        let beta = &spec.betas[&cam];
        for k in 0..d {
            data[[row, k]] = (data[[row, k]] - beta[k]) / alpha[k];
        }
    }
    biased.with_data(data)
}

fn check_coverage(set: &EmbeddingSet, spec: &BiasSpec) -> Result<()> {
    if let Some(d) = spec.dim() {
        if d != set.dim() {
            return Err(Error::Config(format!(
                "bias dimension {} does not match embedding dimension {}",
                d,
                set.dim()
            )));
        }
    }
    for cam in set.camera_ids() {
        if !spec.alphas.contains_key(&cam) {
            return Err(Error::Config(format!(
                "camera {cam} has no bias entry"
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn tiny_config() -> SynthConfig {
        SynthConfig {
            n_ids: 2,
            samples_per_id_query: 2,
            samples_per_id_gallery: 2,
            dim: 4,
            n_cameras: 2,
            id_center_sigma: 1.0,
            within_id_sigma: 0.2,
            seed: 7,
        }
    }

    fn identity_spec(cameras: &[u32], dim: usize) -> BiasSpec {
        let mut alphas = BTreeMap::new();
        let mut betas = BTreeMap::new();
        for &cam in cameras {
            alphas.insert(cam, vec![1.0; dim]);
            betas.insert(cam, vec![0.0; dim]);
        }
        BiasSpec {
            alphas,
            betas,
            noise_sigma: 0.0,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let (q1, g1) = generate_clean(&tiny_config()).unwrap();
        let (q2, g2) = generate_clean(&tiny_config()).unwrap();
        assert_eq!(q1, q2);
        assert_eq!(g1, g2);
    }

    #[test]
    fn vanishing_spread_collapses_identities_to_their_center() {
        let config = SynthConfig {
            within_id_sigma: 1e-300,
            ..tiny_config()
        };
        let (q, _) = generate_clean(&config).unwrap();
        // Quantized to f32, samples of one identity become identical vectors.
        for id in 0..config.n_ids as i64 {
            let rows: Vec<_> = q
                .pids()
                .iter()
                .enumerate()
                .filter(|(_, p)| **p == id)
                .map(|(i, _)| q.data().row(i).to_owned())
                .collect();
            for r in &rows[1..] {
                assert_eq!(r, &rows[0]);
            }
        }
    }

    #[test]
    fn single_camera_means_all_camids_zero() {
        let config = SynthConfig {
            n_cameras: 1,
            ..tiny_config()
        };
        let (q, g) = generate_clean(&config).unwrap();
        assert!(q.camids().iter().all(|&c| c == 0));
        assert!(g.camids().iter().all(|&c| c == 0));
    }

    #[test]
    fn identities_span_multiple_cameras() {
        let config = SynthConfig {
            n_ids: 5,
            n_cameras: 3,
            samples_per_id_query: 1,
            samples_per_id_gallery: 1,
            ..tiny_config()
        };
        let (q, g) = generate_clean(&config).unwrap();
        for id in 0..config.n_ids as i64 {
            let mut cams: Vec<u32> = q
                .pids()
                .iter()
                .zip(q.camids())
                .chain(g.pids().iter().zip(g.camids()))
                .filter(|(p, _)| **p == id)
                .map(|(_, c)| *c)
                .collect();
            cams.sort_unstable();
            cams.dedup();
            assert!(cams.len() >= 2, "identity {id} under cameras {cams:?}");
        }
    }

    #[test]
    fn identity_bias_is_a_no_op() {
        let (q, _) = generate_clean(&tiny_config()).unwrap();
        let spec = identity_spec(&q.camera_ids(), q.dim());
        let biased = apply_bias(&q, &spec, 3).unwrap();
        assert_eq!(biased, q);
    }

    #[test]
    fn bias_matches_direct_substitution() {
        let set = EmbeddingSet::new(array![[1.0f64, 2.0]], vec![0], vec![0], Role::Query).unwrap();
        let mut spec = identity_spec(&[0], 2);
        spec.alphas.insert(0, vec![2.0, 2.0]);
        spec.betas.insert(0, vec![1.0, -1.0]);
        let biased = apply_bias(&set, &spec, 0).unwrap();
        assert_eq!(biased.data(), &array![[3.0f64, 3.0]]);
        let recovered = recover_unbiased(&biased, &spec).unwrap();
        assert_eq!(recovered.data(), &array![[1.0f64, 2.0]]);
    }

    #[test]
    fn noise_free_bias_inverts_exactly() {
        let (q, _) = generate_clean(&tiny_config()).unwrap();
        let spec = BiasSpec::random(&q.camera_ids(), q.dim(), 0.3, 2.0, 0.0, 99).unwrap();
        let biased = apply_bias(&q, &spec, 5).unwrap();
        let recovered = recover_unbiased(&biased, &spec).unwrap();
        for (a, b) in recovered.data().iter().zip(q.data().iter()) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn noisy_bias_leaves_a_residual() {
        let (q, _) = generate_clean(&tiny_config()).unwrap();
        for seed in 0..10u64 {
            let spec = BiasSpec::random(&q.camera_ids(), q.dim(), 0.1, 1.0, 0.05, seed).unwrap();
            let biased = apply_bias(&q, &spec, seed).unwrap();
            let recovered = recover_unbiased(&biased, &spec).unwrap();
            let residual: f64 = recovered
                .data()
                .iter()
                .zip(q.data().iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            assert!(residual > 0.0, "seed {seed} produced a zero residual");
        }
    }

    #[test]
    fn noiseless_bias_ignores_the_seed() {
        let (q, _) = generate_clean(&tiny_config()).unwrap();
        let spec = BiasSpec::random(&q.camera_ids(), q.dim(), 0.3, 2.0, 0.0, 1).unwrap();
        assert_eq!(
            apply_bias(&q, &spec, 11).unwrap(),
            apply_bias(&q, &spec, 42).unwrap()
        );
    }

    #[test]
    fn missing_camera_key_is_a_config_error() {
        let (q, _) = generate_clean(&tiny_config()).unwrap();
        let mut spec = identity_spec(&q.camera_ids(), q.dim());
        spec.alphas.remove(&0);
        spec.betas.remove(&0);
        assert!(matches!(apply_bias(&q, &spec, 0), Err(Error::Config(_))));
    }

    #[test]
    fn recover_rejects_alpha_below_floor() {
        let set = EmbeddingSet::new(array![[1.0f64]], vec![0], vec![0], Role::Query).unwrap();
        let mut spec = identity_spec(&[0], 1);
        spec.alphas.insert(0, vec![1e-6]);
        assert!(matches!(
            recover_unbiased(&set, &spec),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = tiny_config();
        c.n_ids = 0;
        assert!(generate_clean(&c).is_err());
        let mut c = tiny_config();
        c.within_id_sigma = c.id_center_sigma;
        assert!(generate_clean(&c).is_err());
    }

    #[test]
    fn spec_round_trips_through_json() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("spec.json");
        let spec = BiasSpec::random(&[0, 1, 2], 3, 0.2, 1.5, 0.05, 4).unwrap();
        spec.save(&path).unwrap();
        assert_eq!(BiasSpec::load(&path).unwrap(), spec);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn prop_bias_then_recover_is_identity(seed in 0u64..1000, spec_seed in 0u64..1000) {
            let config = SynthConfig { seed, ..tiny_config() };
            let (q, _) = generate_clean(&config).unwrap();
            let spec =
                BiasSpec::random(&q.camera_ids(), q.dim(), 0.4, 3.0, 0.0, spec_seed).unwrap();
            let biased = apply_bias(&q, &spec, seed).unwrap();
            let recovered = recover_unbiased(&biased, &spec).unwrap();
            for (a, b) in recovered.data().iter().zip(q.data().iter()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
