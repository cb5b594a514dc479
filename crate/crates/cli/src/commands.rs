//! Subcommand implementations.
//!
//! Every command creates its output directory, writes a resolved config next
//! to its outputs, and removes everything it wrote if it fails partway.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dart3_core::adapter::{init_adapter, run_stream, RunDiagnostics};
use dart3_core::camnorm::{compute_camera_stats, normalize, CameraStats};
use dart3_core::embedding_store::{
    load_embedding_set, save_embedding_set, EmbeddingSet,
};
use dart3_core::error::{Error, Result};
use dart3_core::metrics::{
    error_rate_curve, evaluate_retrieval, nmi_camera_bias, CurveTable, EvalReport, ProxyConfig,
};
use dart3_core::embedding_store::Role;
use dart3_core::rng;
use dart3_core::synth_bias::{apply_bias, generate_clean, BiasSpec};
use ndarray::Array2;

use crate::cli::{AdaptArgs, CommonArgs, CurveArgs, EvalArgs, GenArgs, InitStatsArgs, SweepArgs};
use crate::config::{
    write_resolved, AdaptParams, CurveParams, EvalParams, FileConfig, GenParams, Method,
    SweepParams,
};

const STREAM_GEN_BIAS_Q: u64 = 0xA1;
const STREAM_GEN_BIAS_G: u64 = 0xA2;

/// Tracks files written by a command so that a failed run leaves nothing
/// half-baked behind.
struct Outputs {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.written.push(p.clone());
        p
    }

    fn remove_partial(&self) {
        for p in &self.written {
            let _ = std::fs::remove_file(p);
        }
    }
}

/// Runs `body`, deleting any files it already wrote if it errors.
fn with_outputs<F>(dir: &Path, body: F) -> Result<()>
where
    F: FnOnce(&mut Outputs) -> Result<()>,
{
    let mut outputs = Outputs::new(dir)?;
    match body(&mut outputs) {
        Ok(()) => Ok(()),
        Err(e) => {
            outputs.remove_partial();
            Err(e)
        }
    }
}

pub fn manifest_path(array_path: &Path) -> PathBuf {
    array_path.with_extension("manifest.json")
}

fn load_set(array_path: &Path) -> Result<EmbeddingSet> {
    load_embedding_set(array_path, &manifest_path(array_path))
}

fn save_set(set: &EmbeddingSet, outputs: &mut Outputs, stem: &str) -> Result<()> {
    let array = outputs.path(&format!("{stem}.npy"));
    let manifest = outputs.path(&format!("{stem}.manifest.json"));
    save_embedding_set(set, &array, &manifest)
}

fn union_cameras(q: &EmbeddingSet, g: &EmbeddingSet) -> Vec<u32> {
    let mut cams = q.camera_ids();
    cams.extend(g.camera_ids());
    cams.sort_unstable();
    cams.dedup();
    cams
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

pub fn resolve_gen(file: &FileConfig, args: &GenArgs) -> GenParams {
    let s = &file.gen;
    GenParams {
        n_ids: args.n_ids.or(s.n_ids).unwrap_or(50),
        samples_per_id_query: args
            .samples_per_id_query
            .or(s.samples_per_id_query)
            .unwrap_or(2),
        samples_per_id_gallery: args
            .samples_per_id_gallery
            .or(s.samples_per_id_gallery)
            .unwrap_or(4),
        dim: args.dim.or(s.dim).unwrap_or(64),
        n_cameras: args.n_cameras.or(s.n_cameras).unwrap_or(6),
        id_center_sigma: args.id_center_sigma.or(s.id_center_sigma).unwrap_or(1.0),
        within_id_sigma: args.within_id_sigma.or(s.within_id_sigma).unwrap_or(0.3),
        alpha_log_sigma: args.alpha_log_sigma.or(s.alpha_log_sigma).unwrap_or(0.15),
        beta_sigma: args.beta_sigma.or(s.beta_sigma).unwrap_or(2.0),
        noise_sigma: args.noise_sigma.or(s.noise_sigma).unwrap_or(0.05),
    }
}

pub fn cmd_gen(common: &CommonArgs, args: &GenArgs) -> Result<()> {
    let file = FileConfig::load(common.config.as_deref())?;
    let seed = common.seed.or(file.seed).unwrap_or(0);
    let params = resolve_gen(&file, args);

    with_outputs(&common.out, |outputs| {
        write_resolved(
            &outputs.path("gen.resolved.toml"),
            seed,
            GenResolvedSection {
                gen: params.clone(),
            },
        )?;

        let synth = params.synth_config(seed);
        let (clean_q, clean_g) = generate_clean(&synth)?;

        for (name, v) in [
            ("alpha_log_sigma", params.alpha_log_sigma),
            ("beta_sigma", params.beta_sigma),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be non-negative")));
            }
        }
        let spec = BiasSpec::random(
            &union_cameras(&clean_q, &clean_g),
            params.dim,
            params.alpha_log_sigma,
            params.beta_sigma,
            params.noise_sigma,
            seed,
        )?;
        let biased_q = apply_bias(&clean_q, &spec, rng::derive(seed, STREAM_GEN_BIAS_Q))?;
        let biased_g = apply_bias(&clean_g, &spec, rng::derive(seed, STREAM_GEN_BIAS_G))?;

        save_set(&clean_q, outputs, "clean_query")?;
        save_set(&clean_g, outputs, "clean_gallery")?;
        save_set(&biased_q, outputs, "biased_query")?;
        save_set(&biased_g, outputs, "biased_gallery")?;
        spec.save(&outputs.path("bias_spec.json"))?;
        println!(
            "generated {} query rows, {} gallery rows, dim {}, {} cameras -> {}",
            biased_q.len(),
            biased_g.len(),
            params.dim,
            params.n_cameras,
            outputs.dir.display()
        );
        Ok(())
    })
}

#[derive(serde::Serialize)]
struct GenResolvedSection {
    gen: GenParams,
}

// ---------------------------------------------------------------------------
// init-stats
// ---------------------------------------------------------------------------

pub fn cmd_init_stats(common: &CommonArgs, args: &InitStatsArgs) -> Result<()> {
    let file = FileConfig::load(common.config.as_deref())?;
    let seed = common.seed.or(file.seed).unwrap_or(0);
    let pool_mode = args
        .pool_mode
        .or(file.adapt.pool_mode)
        .unwrap_or(crate::config::PoolModeArg::Pooled);

    let query = load_set(&args.query)?;
    let gallery = load_set(&args.gallery)?;
    let stats = compute_camera_stats(&query, &gallery, pool_mode.into())?;
    for warning in &stats.warnings {
        eprintln!("warning: {warning}");
    }

    with_outputs(&common.out, |outputs| {
        write_resolved(
            &outputs.path("init-stats.resolved.toml"),
            seed,
            InitStatsResolvedSection {
                init_stats: InitStatsResolved { pool_mode },
            },
        )?;
        stats.save(&outputs.path("stats.json"))?;
        println!(
            "statistics for {} cameras -> {}",
            stats.query.cameras.len(),
            outputs.dir.display()
        );
        Ok(())
    })
}

#[derive(serde::Serialize)]
struct InitStatsResolved {
    pool_mode: crate::config::PoolModeArg,
}

#[derive(serde::Serialize)]
struct InitStatsResolvedSection {
    init_stats: InitStatsResolved,
}

// ---------------------------------------------------------------------------
// adapt
// ---------------------------------------------------------------------------

pub fn resolve_adapt(file: &FileConfig, args: &AdaptArgs) -> AdaptParams {
    let s = &file.adapt;
    AdaptParams {
        method: args.method.or(s.method).unwrap_or(Method::Dart3Lite),
        tau: args.tau.or(s.tau).unwrap_or(100.0),
        k: args.k.or(s.k).unwrap_or(3),
        lr: args.lr.or(s.lr).unwrap_or(1e-4),
        steps: args.steps.or(s.steps).unwrap_or(1),
        batch_size: args.batch_size.or(s.batch_size).unwrap_or(32),
        episodic: args.episodic || s.episodic.unwrap_or(false),
        grounding: args.grounding.or(s.grounding).unwrap_or(0),
        fallback: args
            .fallback
            .or(s.fallback)
            .unwrap_or(crate::config::FallbackArg::Global),
        optimizer: args
            .optimizer
            .or(s.optimizer)
            .unwrap_or(crate::config::OptimizerArg::Adam),
        pool_mode: args
            .pool_mode
            .or(s.pool_mode)
            .unwrap_or(crate::config::PoolModeArg::Pooled),
    }
}

fn load_or_compute_stats(
    stats_path: Option<&Path>,
    query: &EmbeddingSet,
    gallery: &EmbeddingSet,
    params: &AdaptParams,
) -> Result<CameraStats> {
    match stats_path {
        Some(path) => CameraStats::load(path),
        None => compute_camera_stats(query, gallery, params.pool_mode.into()),
    }
}

/// The transformed (query, gallery) pair plus adaptation diagnostics.
fn run_method(
    query: &EmbeddingSet,
    gallery: &EmbeddingSet,
    stats: &CameraStats,
    params: &AdaptParams,
    seed: u64,
) -> Result<(EmbeddingSet, EmbeddingSet, Option<RunDiagnostics>)> {
    match params.method {
        Method::Noadapt => Ok((query.clone(), gallery.clone(), None)),
        Method::Norm => Ok((
            normalize(query, &stats.query)?,
            normalize(gallery, &stats.gallery)?,
            None,
        )),
        Method::Dart3Lite | Method::TempLite => {
            let config = params.adapter_config(seed);
            let mut state = init_adapter(stats, gallery, &config)?;
            let (adapted, diagnostics) = run_stream(query, &mut state, &config)?;
            let gallery_tilde = gallery.with_data(state.gallery_norm().clone())?;
            Ok((adapted, gallery_tilde, Some(diagnostics)))
        }
    }
}

pub fn cmd_adapt(common: &CommonArgs, args: &AdaptArgs) -> Result<()> {
    let file = FileConfig::load(common.config.as_deref())?;
    let seed = common.seed.or(file.seed).unwrap_or(0);
    let params = resolve_adapt(&file, args);

    let query = load_set(&args.query)?;
    let gallery = load_set(&args.gallery)?;
    let stats = load_or_compute_stats(args.stats.as_deref(), &query, &gallery, &params)?;

    with_outputs(&common.out, |outputs| {
        write_resolved(
            &outputs.path("adapt.resolved.toml"),
            seed,
            AdaptResolvedSection {
                adapt: params.clone(),
            },
        )?;
        let (out_q, out_g, diagnostics) = run_method(&query, &gallery, &stats, &params, seed)?;
        save_set(&out_q, outputs, "adapted_query")?;
        save_set(&out_g, outputs, "adapted_gallery")?;
        if let Some(diag) = &diagnostics {
            let mut text = serde_json::to_string_pretty(diag)?;
            text.push('\n');
            write_text(&outputs.path("diagnostics.json"), &text)?;
        }
        println!(
            "method {} over {} query rows -> {}",
            params.method,
            out_q.len(),
            outputs.dir.display()
        );
        Ok(())
    })
}

#[derive(serde::Serialize)]
struct AdaptResolvedSection {
    adapt: AdaptParams,
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

pub fn resolve_eval(file: &FileConfig, args: &EvalArgs) -> EvalParams {
    let s = &file.eval;
    EvalParams {
        max_rank: args.max_rank.or(s.max_rank).unwrap_or(10),
        nmi: !args.no_nmi && s.nmi.unwrap_or(true),
        nmi_clusters: args.nmi_clusters.or(s.nmi_clusters).unwrap_or(0),
    }
}

fn concat_for_nmi(q: &EmbeddingSet, g: &EmbeddingSet) -> Result<EmbeddingSet> {
    let mut data = Vec::with_capacity((q.len() + g.len()) * q.dim());
    data.extend(q.data().iter().copied());
    data.extend(g.data().iter().copied());
    let mut pids = q.pids().to_vec();
    pids.extend_from_slice(g.pids());
    let mut camids = q.camids().to_vec();
    camids.extend_from_slice(g.camids());
    EmbeddingSet::new(
        Array2::from_shape_vec((q.len() + g.len(), q.dim()), data)
            .map_err(|e| Error::Shape(e.to_string()))?,
        pids,
        camids,
        Role::Query,
    )
}

fn render_eval_csvs(report: &EvalReport) -> (String, String) {
    let mut per_camera = String::from("camid,map,rank1,n_queries\n");
    for (cam, row) in &report.per_camera {
        let _ = writeln!(
            per_camera,
            "{cam},{},{},{}",
            row.map, row.rank1, row.n_queries
        );
    }
    let mut cmc = String::from("rank,cmc\n");
    for (r, v) in report.cmc.iter().enumerate() {
        let _ = writeln!(cmc, "{},{}", r + 1, v);
    }
    (per_camera, cmc)
}

pub fn cmd_eval(common: &CommonArgs, args: &EvalArgs) -> Result<()> {
    let file = FileConfig::load(common.config.as_deref())?;
    let seed = common.seed.or(file.seed).unwrap_or(0);
    let params = resolve_eval(&file, args);

    let query = load_set(&args.query)?;
    let gallery = load_set(&args.gallery)?;

    let mut report = evaluate_retrieval(&query, &gallery, params.max_rank)?;
    if params.nmi {
        let features = concat_for_nmi(&query, &gallery)?;
        let clusters = if params.nmi_clusters == 0 {
            None
        } else {
            Some(params.nmi_clusters)
        };
        report.nmi_camera = Some(nmi_camera_bias(&features, clusters, seed)?);
    }

    with_outputs(&common.out, |outputs| {
        write_resolved(
            &outputs.path("eval.resolved.toml"),
            seed,
            EvalResolvedSection {
                eval: params.clone(),
            },
        )?;
        let mut text = serde_json::to_string_pretty(&report)?;
        text.push('\n');
        write_text(&outputs.path("report.json"), &text)?;
        let (per_camera, cmc) = render_eval_csvs(&report);
        write_text(&outputs.path("per_camera.csv"), &per_camera)?;
        write_text(&outputs.path("cmc.csv"), &cmc)?;
        println!(
            "mAP {:.4}, rank-1 {:.4}{} -> {}",
            report.map_score,
            report.cmc.first().copied().unwrap_or(0.0),
            report
                .nmi_camera
                .map(|n| format!(", camera NMI {n:.4}"))
                .unwrap_or_default(),
            outputs.dir.display()
        );
        Ok(())
    })
}

#[derive(serde::Serialize)]
struct EvalResolvedSection {
    eval: EvalParams,
}

// ---------------------------------------------------------------------------
// curve
// ---------------------------------------------------------------------------

pub fn resolve_curve(file: &FileConfig, args: &CurveArgs) -> CurveParams {
    let s = &file.curve;
    CurveParams {
        measure: args
            .measure
            .or(s.measure)
            .unwrap_or(crate::config::MeasureArg::Euclidean),
        bins: args.bins.or(s.bins).unwrap_or(8),
        k: args.k.or(s.k).unwrap_or(3),
        tau: args.tau.or(s.tau).unwrap_or(100.0),
    }
}

fn render_curve_csv(table: &CurveTable) -> String {
    let mut text = String::from("bin,mean_stat,error_rate,count\n");
    for bin in &table.bins {
        let _ = writeln!(
            text,
            "{},{},{},{}",
            bin.bin, bin.mean_stat, bin.error_rate, bin.count
        );
    }
    text
}

pub fn cmd_curve(common: &CommonArgs, args: &CurveArgs) -> Result<()> {
    let file = FileConfig::load(common.config.as_deref())?;
    let seed = common.seed.or(file.seed).unwrap_or(0);
    let params = resolve_curve(&file, args);

    let query = load_set(&args.query)?;
    let gallery = load_set(&args.gallery)?;
    let table = error_rate_curve(
        &query,
        &gallery,
        params.measure.into(),
        params.bins,
        ProxyConfig {
            k: params.k,
            tau: params.tau,
        },
    )?;

    with_outputs(&common.out, |outputs| {
        write_resolved(
            &outputs.path("curve.resolved.toml"),
            seed,
            CurveResolvedSection {
                curve: params.clone(),
            },
        )?;
        write_text(&outputs.path("curve.csv"), &render_curve_csv(&table))?;
        println!(
            "{} bins over measure {} -> {}",
            table.bins.len(),
            table.measure,
            outputs.dir.display()
        );
        Ok(())
    })
}

#[derive(serde::Serialize)]
struct CurveResolvedSection {
    curve: CurveParams,
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

pub fn resolve_sweep(file: &FileConfig, args: &SweepArgs) -> Result<SweepParams> {
    let s = &file.sweep;
    let adapt = resolve_adapt(file, &args.adapt);
    let params = SweepParams {
        tau: args
            .tau_list
            .clone()
            .or_else(|| s.tau.clone())
            .unwrap_or_else(|| vec![adapt.tau]),
        k: args
            .k_list
            .clone()
            .or_else(|| s.k.clone())
            .unwrap_or_else(|| vec![adapt.k]),
        steps: args
            .steps_list
            .clone()
            .or_else(|| s.steps.clone())
            .unwrap_or_else(|| vec![adapt.steps]),
        batch_size: args
            .batch_size_list
            .clone()
            .or_else(|| s.batch_size.clone())
            .unwrap_or_else(|| vec![adapt.batch_size]),
        adapt,
    };
    for (name, empty) in [
        ("tau", params.tau.is_empty()),
        ("k", params.k.is_empty()),
        ("steps", params.steps.is_empty()),
        ("batch_size", params.batch_size.is_empty()),
    ] {
        if empty {
            return Err(Error::Config(format!("sweep {name} list must not be empty")));
        }
    }
    Ok(params)
}

#[derive(Debug, Clone, Copy)]
struct GridPoint {
    tau: f64,
    k: usize,
    steps: usize,
    batch_size: usize,
}

struct SweepRow {
    point: GridPoint,
    map: f64,
    rank1: f64,
    wall_ms: f64,
}

fn worker_threads() -> usize {
    std::env::var("DART3_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

fn run_grid_point(
    point: GridPoint,
    query: &EmbeddingSet,
    gallery: &EmbeddingSet,
    stats: &CameraStats,
    base: &AdaptParams,
    seed: u64,
    max_rank: usize,
) -> Result<SweepRow> {
    let start = Instant::now();
    let params = AdaptParams {
        tau: point.tau,
        k: point.k,
        steps: point.steps,
        batch_size: point.batch_size,
        ..base.clone()
    };
    let (out_q, out_g, _) = run_method(query, gallery, stats, &params, seed)?;
    let report = evaluate_retrieval(&out_q, &out_g, max_rank)?;
    Ok(SweepRow {
        point,
        map: report.map_score,
        rank1: report.cmc.first().copied().unwrap_or(0.0),
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

pub fn cmd_sweep(common: &CommonArgs, args: &SweepArgs) -> Result<()> {
    let file = FileConfig::load(common.config.as_deref())?;
    let seed = common.seed.or(file.seed).unwrap_or(0);
    let params = resolve_sweep(&file, args)?;

    let query = load_set(&args.adapt.query)?;
    let gallery = load_set(&args.adapt.gallery)?;
    let stats =
        load_or_compute_stats(args.adapt.stats.as_deref(), &query, &gallery, &params.adapt)?;

    let mut grid = Vec::new();
    for &tau in &params.tau {
        for &k in &params.k {
            for &steps in &params.steps {
                for &batch_size in &params.batch_size {
                    grid.push(GridPoint {
                        tau,
                        k,
                        steps,
                        batch_size,
                    });
                }
            }
        }
    }

    let threads = worker_threads().min(grid.len().max(1));
    let mut rows: Vec<Option<SweepRow>> = Vec::new();
    rows.resize_with(grid.len(), || None);
    if threads <= 1 {
        for (slot, &point) in rows.iter_mut().zip(&grid) {
            *slot = Some(run_grid_point(
                point, &query, &gallery, &stats, &params.adapt, seed, 10,
            )?);
        }
    } else {
        // Each grid point is independent and individually seeded, so rows
        // land in grid order regardless of scheduling.
        let results: Vec<Result<SweepRow>> = std::thread::scope(|scope| {
            let mut handles = Vec::with_capacity(grid.len());
            for chunk in grid.chunks(grid.len().div_ceil(threads)) {
                let (query, gallery, stats, base) = (&query, &gallery, &stats, &params.adapt);
                handles.push(scope.spawn(move || {
                    chunk
                        .iter()
                        .map(|&point| {
                            run_grid_point(point, query, gallery, stats, base, seed, 10)
                        })
                        .collect::<Vec<_>>()
                }));
            }
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("sweep worker panicked"))
                .collect()
        });
        for (slot, result) in rows.iter_mut().zip(results) {
            *slot = Some(result?);
        }
    }

    with_outputs(&common.out, |outputs| {
        write_resolved(
            &outputs.path("sweep.resolved.toml"),
            seed,
            SweepResolvedSection {
                sweep: params.clone(),
            },
        )?;
        let mut text = String::from("tau,k,steps,batch_size,map,rank1,wall_ms\n");
        for row in rows.iter().flatten() {
            let _ = writeln!(
                text,
                "{},{},{},{},{},{},{}",
                row.point.tau,
                row.point.k,
                row.point.steps,
                row.point.batch_size,
                row.map,
                row.rank1,
                row.wall_ms
            );
        }
        write_text(&outputs.path("sweep.csv"), &text)?;
        println!("{} grid points -> {}", grid.len(), outputs.dir.display());
        Ok(())
    })
}

#[derive(serde::Serialize)]
struct SweepResolvedSection {
    sweep: SweepParams,
}
