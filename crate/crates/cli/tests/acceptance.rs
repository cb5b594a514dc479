//! Acceptance criteria exercised through the installed binary: zero-step
//! reduction and end-to-end determinism.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

fn dart3() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dart3"))
}

fn run_ok(args: &[&str]) {
    let output = dart3().args(args).output().expect("spawn dart3");
    assert!(
        output.status.success(),
        "dart3 {args:?} failed:\n{}",
        String::from_utf8_lossy(&output.stderr)
    );
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("reading {}: {e}", path.display()))
}

fn assert_same_bytes(a: &Path, b: &Path) {
    assert_eq!(
        read(a),
        read(b),
        "{} and {} differ",
        a.display(),
        b.display()
    );
}

// ---------------------------------------------------------------------------
// Criterion 9: dart3_lite with lr=0 is byte-identical to plain normalization.
// ---------------------------------------------------------------------------

#[test]
fn criterion_09_zero_step_reduction() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    let stats = root.join("stats");

    run_ok(&[
        "gen",
        "--out",
        data.to_str().unwrap(),
        "--seed",
        "7",
        "--n-ids",
        "10",
        "--dim",
        "12",
        "--samples-per-id-query",
        "3",
        "--samples-per-id-gallery",
        "3",
        "--n-cameras",
        "3",
    ]);
    let query = data.join("biased_query.npy");
    let gallery = data.join("biased_gallery.npy");
    run_ok(&[
        "init-stats",
        "--query",
        query.to_str().unwrap(),
        "--gallery",
        gallery.to_str().unwrap(),
        "--out",
        stats.to_str().unwrap(),
    ]);
    let stats_file = stats.join("stats.json");

    let norm_out = root.join("norm");
    run_ok(&[
        "adapt",
        "--query",
        query.to_str().unwrap(),
        "--gallery",
        gallery.to_str().unwrap(),
        "--stats",
        stats_file.to_str().unwrap(),
        "--out",
        norm_out.to_str().unwrap(),
        "--method",
        "norm",
        "--seed",
        "7",
    ]);
    let zero_out = root.join("zero");
    run_ok(&[
        "adapt",
        "--query",
        query.to_str().unwrap(),
        "--gallery",
        gallery.to_str().unwrap(),
        "--stats",
        stats_file.to_str().unwrap(),
        "--out",
        zero_out.to_str().unwrap(),
        "--method",
        "dart3_lite",
        "--lr",
        "0",
        "--seed",
        "7",
    ]);

    for name in [
        "adapted_query.npy",
        "adapted_query.manifest.json",
        "adapted_gallery.npy",
        "adapted_gallery.manifest.json",
    ] {
        assert_same_bytes(&norm_out.join(name), &zero_out.join(name));
    }

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 5.0, "took {elapsed:?}");
    println!("acceptance 09 zero_step_reduction: pass ({elapsed:?})");
}

// ---------------------------------------------------------------------------
// Criterion 10: the whole pipeline, run twice with one seed, produces
// byte-identical outputs (timing fields in the diagnostics excepted).
// ---------------------------------------------------------------------------

fn run_pipeline(root: &Path) {
    let data = root.join("data");
    let stats = root.join("stats");
    let adapted = root.join("adapted");
    let eval = root.join("eval");

    run_ok(&[
        "gen",
        "--out",
        data.to_str().unwrap(),
        "--seed",
        "99",
        "--n-ids",
        "12",
        "--dim",
        "16",
        "--samples-per-id-query",
        "4",
        "--samples-per-id-gallery",
        "3",
        "--n-cameras",
        "4",
    ]);
    run_ok(&[
        "init-stats",
        "--query",
        data.join("biased_query.npy").to_str().unwrap(),
        "--gallery",
        data.join("biased_gallery.npy").to_str().unwrap(),
        "--out",
        stats.to_str().unwrap(),
        "--seed",
        "99",
    ]);
    run_ok(&[
        "adapt",
        "--query",
        data.join("biased_query.npy").to_str().unwrap(),
        "--gallery",
        data.join("biased_gallery.npy").to_str().unwrap(),
        "--stats",
        stats.join("stats.json").to_str().unwrap(),
        "--out",
        adapted.to_str().unwrap(),
        "--method",
        "dart3_lite",
        "--seed",
        "99",
        "--batch-size",
        "8",
    ]);
    run_ok(&[
        "eval",
        "--query",
        adapted.join("adapted_query.npy").to_str().unwrap(),
        "--gallery",
        adapted.join("adapted_gallery.npy").to_str().unwrap(),
        "--out",
        eval.to_str().unwrap(),
        "--seed",
        "99",
    ]);
}

#[test]
fn criterion_10_end_to_end_determinism() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let run_a = dir.path().join("a");
    let run_b = dir.path().join("b");
    run_pipeline(&run_a);
    run_pipeline(&run_b);

    let data_files = [
        "data/clean_query.npy",
        "data/clean_query.manifest.json",
        "data/clean_gallery.npy",
        "data/clean_gallery.manifest.json",
        "data/biased_query.npy",
        "data/biased_query.manifest.json",
        "data/biased_gallery.npy",
        "data/biased_gallery.manifest.json",
        "data/bias_spec.json",
        "data/gen.resolved.toml",
        "stats/stats.json",
        "stats/init-stats.resolved.toml",
        "adapted/adapted_query.npy",
        "adapted/adapted_query.manifest.json",
        "adapted/adapted_gallery.npy",
        "adapted/adapted_gallery.manifest.json",
        "adapted/adapt.resolved.toml",
        "eval/report.json",
        "eval/per_camera.csv",
        "eval/cmc.csv",
        "eval/eval.resolved.toml",
    ];
    for name in data_files {
        assert_same_bytes(&run_a.join(name), &run_b.join(name));
    }

    // Diagnostics carry wall-clock fields; everything else must agree.
    let strip_timing = |path: &Path| -> serde_json::Value {
        let mut v: serde_json::Value =
            serde_json::from_slice(&read(path)).expect("diagnostics json");
        v["wall_ms_total"] = 0.into();
        for batch in v["batches"].as_array_mut().expect("batches") {
            batch["wall_ms"] = 0.into();
        }
        v
    };
    assert_eq!(
        strip_timing(&run_a.join("adapted/diagnostics.json")),
        strip_timing(&run_b.join("adapted/diagnostics.json"))
    );

    let elapsed = start.elapsed();
    println!("acceptance 10 end_to_end_determinism: pass ({elapsed:?})");
}
