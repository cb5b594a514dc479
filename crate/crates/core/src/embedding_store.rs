//! Query/gallery embedding sets with person and camera metadata.
//!
//! An [`EmbeddingSet`] pairs an N×d feature matrix with per-row person IDs
//! and camera IDs. On disk a set is an NPY array (32-bit floats) plus a JSON
//! manifest carrying the metadata; in memory the data is held in f64 so that
//! downstream numerics (statistics, gradients, finite-difference checks) have
//! headroom. Sets produced by [`load_embedding_set`] or by the synthetic
//! generator hold f32-representable values, so save/load round-trips are
//! bit-exact.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::npy;

/// Person ID marking an unknown identity (allowed for queries).
pub const UNKNOWN_PID: i64 = -1;

/// Whether a set is the probe side or the reference side of retrieval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Query,
    Gallery,
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Role::Query => write!(f, "query"),
            Role::Gallery => write!(f, "gallery"),
        }
    }
}

/// A dense embedding matrix with aligned per-row metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    data: Array2<f64>,
    pids: Vec<i64>,
    camids: Vec<u32>,
    role: Role,
}

impl EmbeddingSet {
    /// Builds a set, validating the type invariants: aligned lengths, at
    /// least one column, finite entries.
    pub fn new(data: Array2<f64>, pids: Vec<i64>, camids: Vec<u32>, role: Role) -> Result<Self> {
        if data.ncols() == 0 {
            return Err(Error::Data("embedding dimension must be at least 1".into()));
        }
        if data.nrows() != pids.len() || data.nrows() != camids.len() {
            return Err(Error::Consistency(format!(
                "row count {} does not match pids ({}) / camids ({})",
                data.nrows(),
                pids.len(),
                camids.len()
            )));
        }
        if let Some((r, c)) = first_non_finite(&data) {
            return Err(Error::Data(format!(
                "non-finite value at row {r}, column {c}"
            )));
        }
        Ok(Self {
            data,
            pids,
            camids,
            role,
        })
    }

    /// Replaces the feature matrix, keeping metadata. Shape must match.
    pub fn with_data(&self, data: Array2<f64>) -> Result<Self> {
        if data.dim() != self.data.dim() {
            return Err(Error::Shape(format!(
                "replacement data has shape {:?}, expected {:?}",
                data.dim(),
                self.data.dim()
            )));
        }
        Self::new(data, self.pids.clone(), self.camids.clone(), self.role)
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn pids(&self) -> &[i64] {
        &self.pids
    }

    pub fn camids(&self) -> &[u32] {
        &self.camids
    }

    pub fn role(&self) -> Role {
        self.role
    }

    /// Number of rows.
    pub fn len(&self) -> usize {
        self.data.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Embedding dimensionality.
    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    /// The distinct camera IDs present, ascending.
    pub fn camera_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.camids.clone();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// One manifest entry; `index` addresses the array row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub index: usize,
    pub pid: i64,
    pub camid: u32,
}

/// Sidecar metadata for an embedding array file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub role: Role,
    pub dim: usize,
    pub count: usize,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    /// Checks that indices form a permutation of `0..count`.
    pub fn validate(&self) -> Result<()> {
        if self.records.len() != self.count {
            return Err(Error::Consistency(format!(
                "manifest lists {} records but declares count {}",
                self.records.len(),
                self.count
            )));
        }
        let mut seen = vec![false; self.count];
        for rec in &self.records {
            if rec.index >= self.count {
                return Err(Error::Consistency(format!(
                    "manifest index {} out of range 0..{}",
                    rec.index, self.count
                )));
            }
            if seen[rec.index] {
                return Err(Error::Consistency(format!(
                    "manifest index {} appears more than once",
                    rec.index
                )));
            }
            seen[rec.index] = true;
        }
        Ok(())
    }
}

/// Loads an embedding set from an NPY array plus its JSON manifest.
///
/// The array is cast to 32-bit floats (`<f8` payloads are narrowed), so the
/// returned values always lie on the f32 grid.
pub fn load_embedding_set(array_path: &Path, manifest_path: &Path) -> Result<EmbeddingSet> {
    let matrix = npy::read_matrix(array_path)?;
    let manifest_text = std::fs::read_to_string(manifest_path)?;
    let manifest: Manifest = serde_json::from_str(&manifest_text)?;
    manifest.validate()?;

    let (rows, cols) = matrix.data.dim();
    if manifest.count != rows || manifest.dim != cols {
        return Err(Error::Consistency(format!(
            "manifest declares {}x{} but array file {} is {}x{}",
            manifest.count,
            manifest.dim,
            array_path.display(),
            rows,
            cols
        )));
    }

    // Storage precision is f32 regardless of the on-disk payload width.
    let mut data = matrix.data;
    for ((r, c), v) in data.indexed_iter_mut() {
        let narrowed = *v as f32;
        if !narrowed.is_finite() {
            return Err(Error::Data(format!(
                "{}: non-finite value at row {r}, column {c}",
                array_path.display()
            )));
        }
        *v = f64::from(narrowed);
    }

    let mut pids = vec![0i64; rows];
    let mut camids = vec![0u32; rows];
    for rec in &manifest.records {
        pids[rec.index] = rec.pid;
        camids[rec.index] = rec.camid;
    }
    EmbeddingSet::new(data, pids, camids, manifest.role)
}

/// Saves an embedding set as an `<f4` NPY array plus a JSON manifest.
///
/// `load_embedding_set(save_embedding_set(x)) == x` bitwise whenever the
/// values already lie on the f32 grid.
pub fn save_embedding_set(
    set: &EmbeddingSet,
    array_path: &Path,
    manifest_path: &Path,
) -> Result<()> {
    npy::write_matrix_f32(array_path, &set.data)?;

    let file = File::create(manifest_path)?;
    let mut out = BufWriter::new(file);
    write!(
        out,
        "{{\n  \"role\": \"{}\",\n  \"dim\": {},\n  \"count\": {},\n  \"records\": [",
        set.role,
        set.dim(),
        set.len()
    )?;
    for (i, (&pid, &camid)) in set.pids.iter().zip(&set.camids).enumerate() {
        let sep = if i == 0 { "" } else { "," };
        write!(
            out,
            "{sep}\n    {{\"index\": {i}, \"pid\": {pid}, \"camid\": {camid}}}"
        )?;
    }
    if set.is_empty() {
        writeln!(out, "]\n}}")?;
    } else {
        writeln!(out, "\n  ]\n}}")?;
    }
    out.flush()?;
    Ok(())
}

/// Groups row indices by camera ID. Every row lands in exactly one bucket.
pub fn camera_partition(set: &EmbeddingSet) -> BTreeMap<u32, Vec<usize>> {
    let mut buckets: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &cam) in set.camids.iter().enumerate() {
        buckets.entry(cam).or_default().push(i);
    }
    buckets
}

fn first_non_finite(data: &Array2<f64>) -> Option<(usize, usize)> {
    data.indexed_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(idx, _)| idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use tempfile::tempdir;

    fn small_set() -> EmbeddingSet {
        EmbeddingSet::new(
            array![[1.0f64, 2.0, 3.0], [4.0, 5.0, 6.0]],
            vec![7, -1],
            vec![0, 3],
            Role::Query,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let a = dir.path().join("q.npy");
        let m = dir.path().join("q.manifest.json");
        let set = small_set();
        save_embedding_set(&set, &a, &m).unwrap();
        let back = load_embedding_set(&a, &m).unwrap();
        assert_eq!(back, set);
        assert_eq!(back.len(), 2);
        assert_eq!(back.dim(), 3);
    }

    #[test]
    fn unknown_pid_survives_round_trip() {
        let dir = tempdir().unwrap();
        let a = dir.path().join("q.npy");
        let m = dir.path().join("q.manifest.json");
        save_embedding_set(&small_set(), &a, &m).unwrap();
        let back = load_embedding_set(&a, &m).unwrap();
        assert_eq!(back.pids(), &[7, -1]);
    }

    #[test]
    fn empty_set_round_trips() {
        let dir = tempdir().unwrap();
        let a = dir.path().join("g.npy");
        let m = dir.path().join("g.manifest.json");
        let set = EmbeddingSet::new(
            Array2::zeros((0, 4)),
            Vec::new(),
            Vec::new(),
            Role::Gallery,
        )
        .unwrap();
        save_embedding_set(&set, &a, &m).unwrap();
        let back = load_embedding_set(&a, &m).unwrap();
        assert_eq!(back, set);
    }

    #[test]
    fn manifest_count_mismatch_is_a_consistency_error() {
        let dir = tempdir().unwrap();
        let a = dir.path().join("q.npy");
        let m = dir.path().join("q.manifest.json");
        save_embedding_set(&small_set(), &a, &m).unwrap();
        let text = std::fs::read_to_string(&m).unwrap();
        let mut manifest: Manifest = serde_json::from_str(&text).unwrap();
        manifest.count = 3;
        manifest.records.push(ManifestRecord {
            index: 2,
            pid: 9,
            camid: 1,
        });
        std::fs::write(&m, serde_json::to_string(&manifest).unwrap()).unwrap();
        assert!(matches!(
            load_embedding_set(&a, &m),
            Err(Error::Consistency(_))
        ));
    }

    #[test]
    fn duplicate_manifest_index_is_rejected() {
        let manifest = Manifest {
            role: Role::Query,
            dim: 2,
            count: 2,
            records: vec![
                ManifestRecord {
                    index: 0,
                    pid: 1,
                    camid: 0,
                },
                ManifestRecord {
                    index: 0,
                    pid: 2,
                    camid: 1,
                },
            ],
        };
        assert!(matches!(manifest.validate(), Err(Error::Consistency(_))));
    }

    #[test]
    fn nan_in_array_names_the_offending_row() {
        let dir = tempdir().unwrap();
        let a = dir.path().join("q.npy");
        let m = dir.path().join("q.manifest.json");
        save_embedding_set(&small_set(), &a, &m).unwrap();
        // Inject a NaN payload directly; the store itself refuses to save one.
        let nan_data = array![[1.0f64, f64::NAN, 3.0], [4.0, 5.0, 6.0]];
        npy::write_matrix_f64(&a, &nan_data).unwrap();
        match load_embedding_set(&a, &m) {
            Err(Error::Data(msg)) => assert!(msg.contains("row 0"), "{msg}"),
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn f64_payload_is_narrowed_to_f32_values() {
        let dir = tempdir().unwrap();
        let a = dir.path().join("q.npy");
        let m = dir.path().join("q.manifest.json");
        let set = small_set();
        save_embedding_set(&set, &a, &m).unwrap();
        let wide = array![[std::f64::consts::PI, 2.0, 3.0], [4.0, 5.0, 6.0]];
        npy::write_matrix_f64(&a, &wide).unwrap();
        let back = load_embedding_set(&a, &m).unwrap();
        assert_eq!(back.data()[[0, 0]], f64::from(std::f64::consts::PI as f32));
    }

    #[test]
    fn manifest_records_may_arrive_out_of_order() {
        let dir = tempdir().unwrap();
        let a = dir.path().join("q.npy");
        let m = dir.path().join("q.manifest.json");
        save_embedding_set(&small_set(), &a, &m).unwrap();
        let text = std::fs::read_to_string(&m).unwrap();
        let mut manifest: Manifest = serde_json::from_str(&text).unwrap();
        manifest.records.reverse();
        std::fs::write(&m, serde_json::to_string(&manifest).unwrap()).unwrap();
        let back = load_embedding_set(&a, &m).unwrap();
        assert_eq!(back.pids(), &[7, -1]);
        assert_eq!(back.camids(), &[0, 3]);
    }

    #[test]
    fn camera_partition_buckets_by_camid() {
        let set = EmbeddingSet::new(
            array![[0.0f64], [1.0], [2.0]],
            vec![0, 1, 2],
            vec![0, 1, 0],
            Role::Gallery,
        )
        .unwrap();
        let parts = camera_partition(&set);
        assert_eq!(parts.len(), 2);
        assert_eq!(parts[&0], vec![0, 2]);
        assert_eq!(parts[&1], vec![1]);
    }

    #[test]
    fn single_camera_partition_holds_every_row() {
        let set = EmbeddingSet::new(
            Array2::zeros((5, 2)),
            vec![0; 5],
            vec![9; 5],
            Role::Query,
        )
        .unwrap();
        let parts = camera_partition(&set);
        assert_eq!(parts.len(), 1);
        assert_eq!(parts[&9], vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn empty_set_partitions_to_empty_map() {
        let set = EmbeddingSet::new(
            Array2::zeros((0, 2)),
            Vec::new(),
            Vec::new(),
            Role::Query,
        )
        .unwrap();
        assert!(camera_partition(&set).is_empty());
    }

    prop_compose! {
        fn arb_set()(
            n in 0usize..12,
            d in 1usize..6,
        )(
            values in prop::collection::vec(-100f32..100f32, n * d),
            pids in prop::collection::vec(-1i64..6, n),
            camids in prop::collection::vec(0u32..4, n),
            n in Just(n),
            d in Just(d),
        ) -> EmbeddingSet {
            let values: Vec<f64> = values.into_iter().map(f64::from).collect();
            EmbeddingSet::new(
                Array2::from_shape_vec((n, d), values).unwrap(),
                pids,
                camids,
                Role::Gallery,
            ).unwrap()
        }
    }

    proptest! {
        #[test]
        fn prop_round_trip_identity(set in arb_set()) {
            let dir = tempdir().unwrap();
            let a = dir.path().join("s.npy");
            let m = dir.path().join("s.manifest.json");
            save_embedding_set(&set, &a, &m).unwrap();
            let back = load_embedding_set(&a, &m).unwrap();
            prop_assert_eq!(back, set);
        }

        #[test]
        fn prop_partition_is_complete_and_disjoint(set in arb_set()) {
            let parts = camera_partition(&set);
            let mut all: Vec<usize> = parts.values().flatten().copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..set.len()).collect::<Vec<_>>());
            for (cam, rows) in &parts {
                for &r in rows {
                    prop_assert_eq!(set.camids()[r], *cam);
                }
            }
        }
    }
}
